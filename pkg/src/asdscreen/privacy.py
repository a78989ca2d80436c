"""Privacy safeguards: k-anonymity / l-diversity audits, sealed containers,
role-based permissions with a hash-chained access log, and an anonymization
audit for manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import struct
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, ConfigError, IntegrityError, SchemaError
from .ingest import MANIFEST_KEYS, DatasetManifest

ACTIONS = ("read", "write", "export")
ARTIFACT_CLASSES = ("manifests", "checkpoints", "reports")


@dataclass
class QuasiIdentifierTable:
    rows: List[dict]
    quasi_identifiers: Sequence[str]
    sensitive_column: Optional[str] = None

    def __post_init__(self):
        if not self.rows:
            raise SchemaError("table has no rows")
        columns = set(self.rows[0])
        for i, row in enumerate(self.rows):
            if set(row) != columns:
                raise SchemaError(f"row {i} columns {sorted(row)} differ from {sorted(columns)}")
        unknown = [c for c in self.quasi_identifiers if c not in columns]
        if unknown:
            raise SchemaError(f"unknown quasi-identifier column(s): {', '.join(unknown)}")
        if self.sensitive_column is not None and self.sensitive_column not in columns:
            raise SchemaError(f"unknown sensitive column {self.sensitive_column!r}")

    def equivalence_classes(self) -> Dict[tuple, List[dict]]:
        classes: Dict[tuple, List[dict]] = defaultdict(list)
        for row in self.rows:
            classes[tuple(row[c] for c in self.quasi_identifiers)].append(row)
        return classes


@dataclass
class AuditResult:
    check: str
    passed: Optional[bool]
    # (quasi-identifier tuple or record id, offending count/detail)
    violations: List[tuple] = field(default_factory=list)
    note: str = ""

    def as_dict(self):
        return {"check": self.check, "passed": self.passed,
                "violations": [list(v) for v in self.violations], "note": self.note}


def _sort_key(item):
    return tuple(str(v) for v in item[0])


def k_anonymity(table: QuasiIdentifierTable, k: int) -> AuditResult:
    """Every quasi-identifier tuple must occur in at least ``k`` rows."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    sizes = Counter(tuple(row[c] for c in table.quasi_identifiers) for row in table.rows)
    bad = sorted(((qi, n) for qi, n in sizes.items() if n < k), key=_sort_key)
    return AuditResult(f"k-anonymity(k={k})", not bad, bad)


def l_diversity(table: QuasiIdentifierTable, l: int) -> AuditResult:  # noqa: E741
    """Every equivalence class must hold at least ``l`` distinct sensitive values."""
    if l < 1:
        raise ConfigError("l must be at least 1")
    if table.sensitive_column is None:
        raise SchemaError("l-diversity needs a sensitive column")
    col = table.sensitive_column
    bad = []
    for qi, rows in table.equivalence_classes().items():
        distinct = len({row[col] for row in rows})
        if distinct < l:
            bad.append((qi, distinct))
    bad.sort(key=_sort_key)
    return AuditResult(f"l-diversity(l={l})", not bad, bad)


def t_closeness(table: QuasiIdentifierTable, t: float) -> AuditResult:
    """Not implemented: no distance between sensitive distributions is fixed."""
    return AuditResult(f"t-closeness(t={t})", None, [], "not implemented")


def manifest_table(manifest: DatasetManifest, per_subject: bool = True) -> List[dict]:
    """Audit rows: attributes plus label/subject/split/modality.

    Attributes missing on some records are filled with ``"*"``.
    """
    keys = sorted({k for r in manifest.records for k in r.attributes})
    rows = []
    seen = set()
    for rec in manifest.records:
        if per_subject:
            if rec.subject_pseudonym in seen:
                continue
            seen.add(rec.subject_pseudonym)
        row = {k: rec.attributes.get(k, "*") for k in keys}
        row.update(label=rec.label, subject=rec.subject_pseudonym, split=rec.split)
        if not per_subject:
            row["modality"] = rec.modality
        rows.append(row)
    return rows


def anonymization_audit(manifest: DatasetManifest, original_names: Iterable[str]) -> AuditResult:
    """Fail if any serialized manifest field contains an original name
    (case-insensitive substring)."""
    names = [n.lower() for n in original_names if n]
    bad = []
    for rec in manifest.records:
        row = json.loads(rec.to_json())
        for key in MANIFEST_KEYS:
            value = row[key]
            text = json.dumps(value, ensure_ascii=False) if isinstance(value, dict) else str(value)
            low = text.lower()
            for name in names:
                if name in low:
                    bad.append((rec.sample_id, key, name))
    return AuditResult("anonymization", not bad, bad)


# --------------------------------------------------------------------------
# sealed containers

SEAL_MAGIC = b"ASDSEAL"
SEAL_VERSION = 1
SCHEME_AES256_GCM = 1
_NONCE_LEN = 12
_HEADER = struct.Struct(f"<{len(SEAL_MAGIC)}sBB{_NONCE_LEN}s")


def seal(payload: bytes, key: bytes) -> bytes:
    """AES-256-GCM with a fresh random nonce; the header is authenticated too.

    Layout: magic | version u8 | scheme u8 | nonce (12) | ciphertext + tag.
    """
    if len(key) != 32:
        raise ConfigError(f"key must be exactly 32 bytes, got {len(key)}")
    nonce = os.urandom(_NONCE_LEN)
    header = _HEADER.pack(SEAL_MAGIC, SEAL_VERSION, SCHEME_AES256_GCM, nonce)
    return header + AESGCM(key).encrypt(nonce, bytes(payload), header)


def unseal(container: bytes, key: bytes) -> bytes:
    if len(key) != 32:
        raise ConfigError(f"key must be exactly 32 bytes, got {len(key)}")
    container = bytes(container)
    if len(container) < _HEADER.size + 16:
        raise AuthenticationError("container too short")
    header = container[:_HEADER.size]
    magic, version, scheme, nonce = _HEADER.unpack(header)
    if magic != SEAL_MAGIC or version != SEAL_VERSION or scheme != SCHEME_AES256_GCM:
        raise AuthenticationError("unrecognised container header")
    try:
        return AESGCM(key).decrypt(nonce, container[_HEADER.size:], header)
    except InvalidTag:
        raise AuthenticationError("authentication failed (wrong key or tampered container)") from None


# --------------------------------------------------------------------------
# role-based access and the access log


@dataclass
class RolePolicy:
    """role -> artifact class -> allowed actions; anything absent is denied."""

    grants: Dict[str, Dict[str, frozenset]]

    @classmethod
    def from_dict(cls, raw: dict) -> "RolePolicy":
        grants = {}
        for role, classes in raw.items():
            if not isinstance(classes, dict):
                raise ConfigError(f"policy entry for {role!r} must map artifact classes to actions")
            grants[role] = {}
            for artifact, actions in classes.items():
                unknown = set(actions) - set(ACTIONS)
                if unknown:
                    raise ConfigError(f"policy {role}/{artifact}: unknown actions {sorted(unknown)}")
                grants[role][artifact] = frozenset(actions)
        return cls(grants)

    @classmethod
    def load(cls, path) -> "RolePolicy":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def allows(self, actor: str, action: str, artifact_class: str) -> bool:
        return action in self.grants.get(actor, {}).get(artifact_class, frozenset())


GENESIS_HASH = "0" * 64
_ENTRY_FIELDS = ("seq", "timestamp", "actor", "action", "artifact", "outcome", "prev_hash")


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="microseconds")


def entry_hash(entry: dict) -> str:
    body = json.dumps({k: entry[k] for k in _ENTRY_FIELDS}, separators=(",", ":"), sort_keys=True)
    return hashlib.sha256((entry["prev_hash"] + body).encode("utf-8")).hexdigest()


def verify_chain(entries: Sequence[dict], head: Optional[dict] = None) -> None:
    """Raise IntegrityError unless ``entries`` form an unbroken chain that ends
    at ``head`` (``{"seq", "entry_hash"}``) when one is given."""
    prev = GENESIS_HASH
    for i, entry in enumerate(entries):
        if entry.get("seq") != i:
            raise IntegrityError(f"entry {i}: sequence number {entry.get('seq')!r}")
        if entry.get("prev_hash") != prev:
            raise IntegrityError(f"entry {i}: prev_hash does not match predecessor")
        if entry.get("entry_hash") != entry_hash(entry):
            raise IntegrityError(f"entry {i}: entry_hash mismatch (entry altered)")
        prev = entry["entry_hash"]
    if head is not None:
        n = head.get("seq", -1) + 1
        if n != len(entries) or (entries and head.get("entry_hash") != prev):
            raise IntegrityError(f"log head records {n} entries, log has {len(entries)}")


class AccessLog:
    """Append-only JSON Lines log; each entry hashes its predecessor.

    A ``<log>.head`` file pins the latest sequence number and hash so that
    truncation is detectable as well. Appends are serialized by a lock.
    """

    def __init__(self, path, clock: Callable[[], str] = _utc_now):
        self.path = Path(path)
        self.head_path = self.path.with_name(self.path.name + ".head")
        self.clock = clock
        self._lock = threading.Lock()
        entries = self.read()
        verify_chain(entries, self._read_head())
        self._tail = entries[-1]["entry_hash"] if entries else GENESIS_HASH
        self._seq = len(entries)

    def read(self) -> List[dict]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            try:
                return [json.loads(line) for line in fh if line.strip()]
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{self.path}: unreadable entry ({exc})") from None

    def _read_head(self):
        if not self.head_path.exists():
            return None if not self.path.exists() else {"seq": -1}
        return json.loads(self.head_path.read_text(encoding="utf-8"))

    def _last_on_disk(self) -> Tuple[int, str]:
        entries = self.read()
        if not entries:
            return 0, GENESIS_HASH
        return len(entries), entries[-1].get("entry_hash")

    def append(self, actor: str, action: str, artifact: str, outcome: str) -> dict:
        with self._lock:
            n, tail = self._last_on_disk()
            if n != self._seq or tail != self._tail:
                raise IntegrityError(f"{self.path}: log changed outside this writer")
            entry = {"seq": self._seq, "timestamp": self.clock(), "actor": actor,
                     "action": action, "artifact": artifact, "outcome": outcome,
                     "prev_hash": self._tail}
            entry["entry_hash"] = entry_hash(entry)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=False) + "\n")
            self.head_path.write_text(
                json.dumps({"seq": entry["seq"], "entry_hash": entry["entry_hash"]}) + "\n",
                encoding="utf-8")
            self._tail = entry["entry_hash"]
            self._seq += 1
            return entry

    def verify(self) -> None:
        verify_chain(self.read(), self._read_head())


def authorize(policy: RolePolicy, actor: str, action: str, artifact_class: str,
              log: AccessLog, artifact: Optional[str] = None) -> bool:
    """Deny-by-default decision; exactly one log entry is appended per call."""
    allowed = action in ACTIONS and policy.allows(actor, action, artifact_class)
    log.append(actor, action, artifact or artifact_class, "allowed" if allowed else "denied")
    return allowed
