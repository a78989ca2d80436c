"""Corpus ingestion: directory walk, pseudonymization, manifests and splits.

Expected layout::

    root/
      labels.json              {"<class dir>": 0 | 1, ...}
      <class dir>/
        <subject dir>/
          attributes.json      optional {"sex": "f", "severity": "severe", ...}
          *.png | *.jpg | *.jpeg | *.skel | *.angles.csv   (any depth)

Subject directory names never leave this module: records carry a keyed-hash
pseudonym and a rewritten path. The mapping back to real files is kept in a
separate locator (sample_id -> original relative path) that is written next
to the manifest and should be treated as restricted.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import hmac
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, StructureError

LABELS_FILE = "labels.json"
ATTRIBUTES_FILE = "attributes.json"

MODALITIES = ("color_frame", "skeleton_joints", "joint_angles")
SPLITS = ("train", "val", "test", "unassigned")

# Longest suffix first so ".angles.csv" wins over a bare ".csv".
_SUFFIX_MODALITY = (
    (".angles.csv", "joint_angles"),
    (".skel", "skeleton_joints"),
    (".png", "color_frame"),
    (".jpg", "color_frame"),
    (".jpeg", "color_frame"),
)

MANIFEST_KEYS = ("sample_id", "subject", "path", "label", "modality", "attributes", "split")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    subject_pseudonym: str
    path: str
    label: int
    modality: str = "color_frame"
    attributes: Dict[str, str] = field(default_factory=dict)
    split: str = "unassigned"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")

    def to_json(self) -> str:
        row = {
            "sample_id": self.sample_id,
            "subject": self.subject_pseudonym,
            "path": self.path,
            "label": self.label,
            "modality": self.modality,
            "attributes": {k: self.attributes[k] for k in sorted(self.attributes)},
            "split": self.split,
        }
        return json.dumps(row, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        row = json.loads(line)
        if tuple(row) != MANIFEST_KEYS:
            raise StructureError(f"manifest row keys {tuple(row)} != {MANIFEST_KEYS}")
        return cls(
            sample_id=row["sample_id"],
            subject_pseudonym=row["subject"],
            path=row["path"],
            label=int(row["label"]),
            modality=row["modality"],
            attributes=dict(row["attributes"] or {}),
            split=row["split"],
        )


@dataclass
class DatasetManifest:
    records: List[SampleRecord]
    corpus_root: str
    salt_fingerprint: str
    created_at: Optional[str] = None
    # sample_id -> original path relative to corpus_root; never serialized
    # into the manifest itself.
    locator: Dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise StructureError(f"duplicate sample_id {rec.sample_id}")
            seen.add(rec.sample_id)

    def __len__(self):
        return len(self.records)

    def with_records(self, records: Iterable[SampleRecord]) -> "DatasetManifest":
        return replace(self, records=list(records), locator=dict(self.locator))

    def split_records(self, split: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def resolve(self, rec: SampleRecord) -> Path:
        """Absolute path of the real file behind ``rec`` (augmented or not)."""
        base = base_sample_id(rec.sample_id)
        try:
            rel = self.locator[base]
        except KeyError:
            raise StructureError(
                f"no locator entry for sample {base}; pass the locator written by ingest"
            ) from None
        return Path(self.corpus_root) / rel


def base_sample_id(sample_id: str) -> str:
    """Strip augmentation (``#tag``) and duplication (``~rN``) suffixes."""
    for sep in ("#", "~"):
        sample_id = sample_id.split(sep, 1)[0]
    return sample_id


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.9
    val_fraction: float = 0.1
    test_fraction: float = 0.0
    seed: int = 0
    stratify: bool = True
    image_level: bool = False

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total!r}, expected 1")

    @property
    def fractions(self):
        return (self.train_fraction, self.val_fraction, self.test_fraction)


# --------------------------------------------------------------------------
# pseudonymization


def _keyed_hex(salt: bytes, message: str, avoid: str = "") -> str:
    """First 16 hex chars of HMAC-SHA256(salt, message).

    If ``avoid`` happens to appear in the digest (short numeric folder names
    can), the message is re-keyed with a counter until it does not.
    """
    avoid = avoid.lower()
    counter = 0
    while True:
        msg = message.encode("utf-8")
        if counter:
            msg += b"\x00" + str(counter).encode()
        digest = hmac.new(salt, msg, hashlib.sha256).hexdigest()[:16]
        if not avoid or avoid not in digest:
            return digest
        counter += 1


def pseudonymize(name: str, salt: bytes) -> str:
    if not salt:
        raise ConfigError("pseudonymization salt must be non-empty")
    return _keyed_hex(salt, "subject:" + name, avoid=name)


def salt_fingerprint(salt: bytes) -> str:
    return hashlib.sha256(b"asdscreen-salt:" + salt).hexdigest()[:12]


def _modality_of(name: str) -> Optional[str]:
    lower = name.lower()
    for suffix, modality in _SUFFIX_MODALITY:
        if lower.endswith(suffix):
            return modality
    return None


def _suffix_of(name: str) -> str:
    lower = name.lower()
    for suffix, _ in _SUFFIX_MODALITY:
        if lower.endswith(suffix):
            return suffix
    return ""


def _read_labels(root: Path) -> Dict[str, int]:
    path = root / LABELS_FILE
    if not path.is_file():
        raise StructureError(f"{root}: missing {LABELS_FILE} mapping class directories to 0/1")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructureError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or not raw:
        raise StructureError(f"{path}: expected a non-empty object")
    labels = {}
    for name, value in raw.items():
        if value not in (0, 1) or isinstance(value, bool):
            raise StructureError(f"{path}: class {name!r} maps to {value!r}, expected 0 or 1")
        labels[name] = int(value)
    return labels


def _read_attributes(subject_dir: Path) -> Dict[str, str]:
    path = subject_dir / ATTRIBUTES_FILE
    if not path.is_file():
        return {}
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise StructureError(f"{path}: expected an object of attribute -> value")
    return {str(k): str(v) for k, v in raw.items()}


def _visible_entries(directory: Path):
    return sorted(p for p in directory.iterdir() if not p.name.startswith("."))


def scan_corpus(root, salt: bytes, *, timestamp: bool = True) -> DatasetManifest:
    """Walk ``root`` and return a pseudonymized manifest, one record per file."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    if not root.is_dir():
        raise NotADirectoryError(f"corpus root {root} is not a directory")
    if isinstance(salt, str):
        salt = salt.encode("utf-8")
    if not salt:
        raise ConfigError("pseudonymization salt must be non-empty")

    labels = _read_labels(root)
    # (original relative path, label, subject name, class dir, attributes)
    found = []
    for class_dir in _visible_entries(root):
        if not class_dir.is_dir():
            continue
        if class_dir.name not in labels:
            raise StructureError(
                f"folder {class_dir.name!r} is not a class listed in {LABELS_FILE}"
            )
        for subject_dir in _visible_entries(class_dir):
            if not subject_dir.is_dir():
                if _modality_of(subject_dir.name):
                    raise StructureError(
                        f"{class_dir.name}/{subject_dir.name}: sample file outside a subject folder"
                    )
                continue
            attributes = _read_attributes(subject_dir)
            for dirpath, dirnames, filenames in os.walk(subject_dir):
                dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
                for fname in sorted(filenames):
                    if fname.startswith(".") or _modality_of(fname) is None:
                        continue
                    rel = Path(dirpath, fname).relative_to(root).as_posix()
                    found.append((rel, labels[class_dir.name], subject_dir.name,
                                  class_dir.name, attributes))

    if not found:
        raise StructureError(f"corpus {root} contains no sample files")
    found.sort(key=lambda item: item[0])

    records = []
    locator = {}
    per_subject_index: Dict[str, int] = {}
    for rel, label, subject, class_name, attributes in found:
        pseudonym = pseudonymize(subject, salt)
        key = f"{class_name}/{subject}"
        idx = per_subject_index.get(key, 0)
        per_subject_index[key] = idx + 1
        fname = PurePosixPath(rel).name
        sample_id = _keyed_hex(salt, "sample:" + rel, avoid=subject)
        records.append(SampleRecord(
            sample_id=sample_id,
            subject_pseudonym=pseudonym,
            path=f"{class_name}/{pseudonym}/{idx:05d}{_suffix_of(fname)}",
            label=label,
            modality=_modality_of(fname),
            attributes=dict(attributes),
        ))
        locator[sample_id] = rel

    created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if timestamp else None
    return DatasetManifest(
        records=records,
        corpus_root=str(root.resolve()),
        salt_fingerprint=salt_fingerprint(salt),
        created_at=created,
        locator=locator,
    )


# --------------------------------------------------------------------------
# splits


def _allocate(n: int, fractions) -> List[int]:
    """Split ``n`` units by largest remainder; every split with a nonzero
    fraction receives at least one unit when ``n`` allows it."""
    targets = [n * f for f in fractions]
    counts = [int(np.floor(t)) for t in targets]
    short = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(targets[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(fractions)), key=lambda j: (counts[j] - targets[j], -j))
            if counts[donor] - targets[donor] <= 0 or counts[donor] <= 1:
                continue
            counts[donor] -= 1
            counts[i] += 1
    return counts


def _subject_labels(records: List[SampleRecord]) -> Dict[str, int]:
    labels: Dict[str, int] = {}
    for rec in records:
        prev = labels.setdefault(rec.subject_pseudonym, rec.label)
        if prev != rec.label:
            raise StructureError(f"subject {rec.subject_pseudonym} carries both labels")
    return labels


MAX_SPLIT_DRAWS = 1000


def _draw_assignment(groups, fractions, rng) -> Dict[str, str]:
    assignment: Dict[str, str] = {}
    for group in groups:
        perm = rng.permutation(len(group))
        counts = _allocate(len(group), fractions)
        shuffled = [group[i] for i in perm]
        start = 0
        for split, count in zip(("train", "val", "test"), counts):
            for u in shuffled[start:start + count]:
                assignment[u] = split
            start += count
    return assignment


def _balance_excess(assignment, unit_label, sizes) -> float:
    """How far the train label-1 fraction strays beyond max_size / train_size."""
    train = [u for u, split in assignment.items() if split == "train"]
    n_train = sum(sizes[u] for u in train)
    total = sum(sizes.values())
    gap = abs(sum(sizes[u] for u in train if unit_label[u] == 1) / n_train
              - sum(n for u, n in sizes.items() if unit_label[u] == 1) / total)
    return gap - max(sizes.values()) / n_train


def make_splits(manifest: DatasetManifest, cfg: SplitConfig) -> DatasetManifest:
    """Assign train/val/test by a seeded shuffle of subjects (or samples when
    ``cfg.image_level``), stratified by label when ``cfg.stratify``.

    With stratification, a draw whose train split strays from the overall
    label-1 fraction by more than (largest unit size) / (train size) is
    redrawn from the same generator; after ``MAX_SPLIT_DRAWS`` attempts the
    closest draw is kept.
    """
    if not manifest.records:
        raise StructureError("cannot split an empty manifest")

    if cfg.image_level:
        unit_of = lambda rec: rec.sample_id  # noqa: E731
        unit_label = {rec.sample_id: rec.label for rec in manifest.records}
    else:
        unit_of = lambda rec: rec.subject_pseudonym  # noqa: E731
        unit_label = _subject_labels(manifest.records)

    units = sorted(unit_label)
    if cfg.stratify:
        groups = [[u for u in units if unit_label[u] == c] for c in (0, 1)]
        for c, group in enumerate(groups):
            if len(group) < 2:
                raise ConfigError(
                    f"stratified split needs at least 2 units per class; class {c} has {len(group)}"
                )
    else:
        groups = [units]

    needed = sum(1 for f in cfg.fractions if f > 0)
    for group in groups:
        if len(group) < needed:
            raise ConfigError(f"{len(group)} units cannot fill {needed} non-empty splits")
    rng = np.random.default_rng(cfg.seed)
    sizes = Counter(unit_of(rec) for rec in manifest.records)
    best: Optional[Tuple[float, Dict[str, str]]] = None
    for _ in range(MAX_SPLIT_DRAWS):
        assignment = _draw_assignment(groups, cfg.fractions, rng)
        if not cfg.stratify:
            break
        excess = _balance_excess(assignment, unit_label, sizes)
        if excess <= 0:
            break
        if best is None or excess < best[0]:
            best = (excess, assignment)
    else:
        assignment = best[1]

    return manifest.with_records(
        replace(rec, split=assignment[unit_of(rec)]) for rec in manifest.records
    )


# --------------------------------------------------------------------------
# manifest files


def _sidecar(path: Path, kind: str) -> Path:
    name = path.name
    stem = name[: -len(".jsonl")] if name.endswith(".jsonl") else name
    return path.with_name(f"{stem}.{kind}.json")


def write_manifest(manifest: DatasetManifest, path, *, timestamps: bool = True) -> Path:
    """Write records as JSON Lines plus ``.meta.json`` and ``.locator.json`` sidecars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in manifest.records:
            fh.write(rec.to_json() + "\n")
    meta = {
        "corpus_root": manifest.corpus_root,
        "salt_fingerprint": manifest.salt_fingerprint,
        "created_at": manifest.created_at if timestamps else None,
        "n_records": len(manifest.records),
    }
    _sidecar(path, "meta").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if manifest.locator:
        _sidecar(path, "locator").write_text(
            json.dumps(manifest.locator, indent=0, sort_keys=True) + "\n", encoding="utf-8"
        )
    return path


def read_manifest(path, locator=None) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StructureError(f"{path}:{lineno}: bad manifest row ({exc})") from None
    meta_path = _sidecar(path, "meta")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    loc_path = Path(locator) if locator else _sidecar(path, "locator")
    loc = json.loads(loc_path.read_text(encoding="utf-8")) if loc_path.is_file() else {}
    return DatasetManifest(
        records=records,
        corpus_root=meta.get("corpus_root", str(path.parent)),
        salt_fingerprint=meta.get("salt_fingerprint", ""),
        created_at=meta.get("created_at"),
        locator=loc,
    )


def class_counts(records: Iterable[SampleRecord], by_subject: bool = False) -> Dict[int, int]:
    counts = {0: 0, 1: 0}
    if by_subject:
        for subject, label in _subject_labels(list(records)).items():
            counts[label] += 1
    else:
        for rec in records:
            counts[rec.label] += 1
    return counts
