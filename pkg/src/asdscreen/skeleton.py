"""Skeleton text files and joint-angle features.

File format (whitespace separated, ``#`` starts a comment line)::

    #skeleton v1 joints=25
    0 0 0.1 0.2 0.3
    0 1 ...
    1 0 ...

One line per (frame, joint). Frames are numbered 0..F-1 and each frame lists
joints 0..J-1 in order.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, ParseError

_HEADER = re.compile(r"^#skeleton\s+v1\s+joints=(\d+)\s*$")


def load_skeleton(path) -> np.ndarray:
    """Parse a skeleton file into an ``(F, J, 3)`` float64 array."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError("empty skeleton file", line=1)
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise ParseError("expected header '#skeleton v1 joints=<J>'", line=1)
    n_joints = int(m.group(1))
    if n_joints < 1:
        raise ParseError("joint count must be positive", line=1)

    frames = []
    current = []
    current_frame = 0
    frame_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields 'frame joint x y z', got {len(fields)}", line=lineno)
        try:
            frame, joint = int(fields[0]), int(fields[1])
        except ValueError:
            raise ParseError(f"non-integer frame/joint index in {text!r}", line=lineno) from None
        try:
            xyz = [float(v) for v in fields[2:]]
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {text!r}", line=lineno) from None

        if frame != current_frame:
            if frame != current_frame + 1:
                raise ParseError(f"frame {frame} follows frame {current_frame}", line=lineno)
            if len(current) != n_joints:
                raise ParseError(
                    f"frame {current_frame} (from line {frame_start}) has {len(current)} joints, "
                    f"expected {n_joints}", line=lineno)
            frames.append(current)
            current, current_frame = [], frame
        if not current:
            frame_start = lineno
        if joint != len(current):
            raise ParseError(
                f"frame {frame}: joint {joint} out of order or beyond joints={n_joints}"
                if joint < n_joints else
                f"frame {frame} has more than {n_joints} joints", line=lineno)
        current.append(xyz)

    if not current:
        if not frames:
            raise ParseError("no frames in skeleton file", line=len(lines))
    elif len(current) != n_joints:
        raise ParseError(
            f"frame {current_frame} has {len(current)} joints, expected {n_joints}",
            line=len(lines))
    else:
        frames.append(current)
    return np.asarray(frames, dtype=np.float64)


def write_skeleton(path, coords) -> None:
    """Inverse of :func:`load_skeleton`; ``repr`` keeps floats bit-exact."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 3 or coords.shape[0] < 1:
        raise ValueError(f"expected (F, J, 3) coordinates, got shape {coords.shape}")
    out = [f"#skeleton v1 joints={coords.shape[1]}"]
    for f, frame in enumerate(coords):
        for j, (x, y, z) in enumerate(frame):
            out.append(f"{f} {j} {float(x)!r} {float(y)!r} {float(z)!r}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def joint_angles(skeleton, triples) -> np.ndarray:
    """Angle in degrees at joint ``b`` for each ``(a, b, c)`` triple, per frame.

    Returns an ``(F, len(triples))`` array with values in [0, 180].
    """
    sk = np.asarray(skeleton, dtype=np.float64)
    if sk.ndim != 3 or sk.shape[2] != 3:
        raise ValueError(f"expected (F, J, 3) coordinates, got shape {sk.shape}")
    idx = np.asarray(triples, dtype=np.intp).reshape(-1, 3)
    n_joints = sk.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n_joints):
        raise IndexError(f"joint index out of range for {n_joints} joints")

    u = sk[:, idx[:, 0]] - sk[:, idx[:, 1]]
    v = sk[:, idx[:, 2]] - sk[:, idx[:, 1]]
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    bad = (nu == 0) | (nv == 0)
    if bad.any():
        frame, t = map(int, np.argwhere(bad)[0])
        raise DegenerateGeometryError(
            f"frame {frame}, triple {t} {tuple(int(i) for i in idx[t])}: zero-length limb vector")
    cos = np.einsum("ftk,ftk->ft", u, v) / (nu * nv)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
