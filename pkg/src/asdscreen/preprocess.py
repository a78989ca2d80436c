"""Image preprocessing: resize, [0, 1] scaling and deterministic augmentation.

Images are ``(H, W, 3)`` float64 arrays. Augmented samples are never written
to disk; the manifest records a transform tag (``<path>#<tag>``) and the
transform is applied when the sample is loaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, DomainError, PolicyError, ShapeError
from .ingest import DatasetManifest, SampleRecord

TRANSFORMS = ("identity", "hflip", "rotate", "zoom", "shift_x", "shift_y",
              "brightness", "rotate_hflip")

# sampling coordinates closer than this to an integer are snapped, so that
# e.g. 90 degree rotations reduce to exact pixel permutations
_SNAP = 1e-9


def _bilinear_axis(n_in: int, n_out: int) -> tuple:
    """Source indices and weights along one axis, half-pixel centres."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img, side: int) -> np.ndarray:
    """Bilinear resize to ``side x side`` (align_corners=False convention)."""
    if side <= 0:
        raise ConfigError(f"resize side must be positive, got {side}")
    if side < 8:
        raise ConfigError(f"resize side must be at least 8, got {side}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ShapeError(f"expected a non-empty (H, W, C) image, got shape {img.shape}")
    if img.shape[0] == side and img.shape[1] == side:
        return img.copy()

    r0, r1, fr = _bilinear_axis(img.shape[0], side)
    c0, c1, fc = _bilinear_axis(img.shape[1], side)
    top, bottom = img[r0], img[r1]
    rows = top + (bottom - top) * fr[:, None, None]
    left, right = rows[:, c0], rows[:, c1]
    out = left + (right - left) * fc[None, :, None]
    return np.clip(out, img.min(), img.max())


def normalize(img) -> np.ndarray:
    """Scale raw 0-255 intensities into [0, 1]."""
    arr = np.asarray(img)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255):
        raise DomainError("pixel intensities must lie in [0, 255]")
    return arr.astype(np.float64) / 255.0


@dataclass(frozen=True)
class AugmentationSpec:
    """One deterministic transform.

    Geometric transforms share a single inverse-mapped affine warp built from
    ``rotation_degrees`` (counter-clockwise), ``zoom_factor`` (>1 magnifies)
    and ``shift_fraction`` (of the image side; applied along x for
    ``shift_x`` and y for ``shift_y``). ``seed`` is carried for provenance;
    all parameters are explicit so no randomness is drawn.
    """

    transform: str
    rotation_degrees: float = 0.0
    zoom_factor: float = 1.0
    shift_fraction: float = 0.0
    brightness_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if not -30.0 <= self.rotation_degrees <= 30.0:
            raise ConfigError(f"rotation_degrees {self.rotation_degrees} outside [-30, 30]")
        if not 0.8 <= self.zoom_factor <= 1.25:
            raise ConfigError(f"zoom_factor {self.zoom_factor} outside [0.8, 1.25]")
        if abs(self.shift_fraction) > 0.2:
            raise ConfigError(f"|shift_fraction| {self.shift_fraction} exceeds 0.2")
        if abs(self.brightness_delta) > 0.2:
            raise ConfigError(f"|brightness_delta| {self.brightness_delta} exceeds 0.2")

    @property
    def tag(self) -> str:
        parts = []
        if self.rotation_degrees != 0.0:
            parts.append(f"r={float(self.rotation_degrees)!r}")
        if self.zoom_factor != 1.0:
            parts.append(f"z={float(self.zoom_factor)!r}")
        if self.shift_fraction != 0.0:
            parts.append(f"s={float(self.shift_fraction)!r}")
        if self.brightness_delta != 0.0:
            parts.append(f"b={float(self.brightness_delta)!r}")
        return self.transform + (":" + ",".join(parts) if parts else "")

    @classmethod
    def from_tag(cls, tag: str) -> "AugmentationSpec":
        name, _, params = tag.partition(":")
        keys = {"r": "rotation_degrees", "z": "zoom_factor", "s": "shift_fraction",
                "b": "brightness_delta"}
        kwargs = {}
        for item in filter(None, params.split(",")):
            key, _, value = item.partition("=")
            if key not in keys:
                raise ConfigError(f"bad augmentation tag {tag!r}")
            try:
                kwargs[keys[key]] = float(value)
            except ValueError:
                raise ConfigError(f"bad augmentation tag {tag!r}") from None
        return cls(name, **kwargs)


DEFAULT_PLAN = (
    AugmentationSpec("hflip"),
    AugmentationSpec("rotate", rotation_degrees=15.0),
    AugmentationSpec("rotate", rotation_degrees=-15.0),
    AugmentationSpec("zoom", zoom_factor=0.9),
    AugmentationSpec("zoom", zoom_factor=1.1),
    AugmentationSpec("shift_x", shift_fraction=0.1),
    AugmentationSpec("rotate_hflip", rotation_degrees=15.0),
)


def _sample_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.clip(rows, 0.0, h - 1)
    cols = np.clip(cols, 0.0, w - 1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    top = img[r0, c0] + (img[r0, c1] - img[r0, c0]) * fc
    bottom = img[r1, c0] + (img[r1, c1] - img[r1, c0]) * fc
    return top + (bottom - top) * fr


def warp_coordinates(h: int, w: int, degrees: float, zoom: float, shift_x: float, shift_y: float):
    """Source (row, col) for every output pixel.

    Works in centred coordinates with y pointing up; the output pixel ``p``
    samples the input at ``R(-angle) (p - t) / zoom``. Shifts are in pixels,
    positive x to the right and positive y downwards.
    """
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                       indexing="ij")
    x = (c - cx) - shift_x
    y = (cy - r) + shift_y
    x_in = (cos * x + sin * y) / zoom
    y_in = (-sin * x + cos * y) / zoom
    src_c = x_in + cx
    src_r = cy - y_in
    for arr in (src_r, src_c):
        near = np.round(arr)
        snap = np.abs(arr - near) < _SNAP
        arr[snap] = near[snap]
    return src_r, src_c


def affine_warp(img, degrees: float = 0.0, zoom: float = 1.0, shift_x: float = 0.0,
                shift_y: float = 0.0) -> np.ndarray:
    """Bilinear affine warp with nearest-edge fill; no parameter range checks."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = warp_coordinates(img.shape[0], img.shape[1], degrees, zoom, shift_x, shift_y)
    return np.clip(_sample_bilinear(img, rows, cols), img.min(), img.max())


def augment(img, spec: AugmentationSpec) -> np.ndarray:
    """Apply ``spec`` to a square image; shape and value range are preserved."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"augment expects a square (S, S, C) image, got {img.shape}")
    kind = spec.transform
    if kind == "identity":
        return img.copy()
    if kind == "hflip":
        return img[:, ::-1].copy()
    if kind == "brightness":
        return np.clip(img + spec.brightness_delta, 0.0, 1.0)

    side = img.shape[0]
    sx = spec.shift_fraction * side if kind == "shift_x" else 0.0
    sy = spec.shift_fraction * side if kind == "shift_y" else 0.0
    out = affine_warp(img, spec.rotation_degrees, spec.zoom_factor, sx, sy)
    if kind == "rotate_hflip":
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def expand_dataset(manifest: DatasetManifest, specs: Sequence[AugmentationSpec] = DEFAULT_PLAN,
                   splits: Sequence[str] = ("train",)) -> DatasetManifest:
    """Add one derived record per spec after every train-split image record."""
    specs = list(specs)
    if len(specs) != 7:
        raise ConfigError(f"expected exactly 7 augmentation specs, got {len(specs)}")
    if any(s.transform == "identity" for s in specs):
        raise ConfigError("identity is not an augmentation")
    tags = [s.tag for s in specs]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"augmentation specs must be distinct, got {tags}")
    banned = sorted(set(splits) - {"train"})
    if banned:
        raise PolicyError(f"augmentation of {', '.join(banned)} split(s) is not allowed")
    if any("#" in r.sample_id for r in manifest.records):
        raise ConfigError("manifest already contains augmented records")

    out: List[SampleRecord] = []
    for rec in manifest.records:
        out.append(rec)
        if rec.split != "train" or rec.modality != "color_frame":
            continue
        for tag in tags:
            out.append(replace(rec, sample_id=f"{rec.sample_id}#{tag}", path=f"{rec.path}#{tag}"))
    return manifest.with_records(out)


def augmentation_of(rec: SampleRecord):
    """The augmentation recorded on an augmented record, or None."""
    _, sep, tag = rec.sample_id.partition("#")
    return AugmentationSpec.from_tag(tag) if sep else None


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_sample(manifest: DatasetManifest, rec: SampleRecord, side: int) -> np.ndarray:
    """Decode, normalize, resize and (for derived records) augment one sample."""
    img = resize(normalize(load_image(manifest.resolve(rec))), side)
    spec = augmentation_of(rec)
    return augment(img, spec) if spec is not None else img
