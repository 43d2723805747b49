"""Ordered record of oracle exchanges, persisted as JSON lines."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .io import LoadError, canonical_json

# fields that vary between otherwise identical runs; excluded from content digests
VOLATILE_FIELDS = ("latency_ms", "timestamp")


@dataclass(frozen=True)
class TranscriptEntry:
    index: int
    kind: str  # "SCP" or "GRP"
    prompt: str
    response: str
    image_digest: str
    grid: dict | None = None
    error: str | None = None
    latency_ms: float = 0.0
    timestamp: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TranscriptEntry:
        try:
            return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})
        except TypeError as exc:
            raise LoadError(f"bad transcript entry: {exc}") from exc


@dataclass
class OracleTranscript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    # PNG bytes keyed by digest; kept in memory until written out
    images: dict[str, bytes] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def append(self, **kwargs) -> TranscriptEntry:
        with self._lock:
            entry = TranscriptEntry(index=len(self.entries), **kwargs)
            self.entries.append(entry)
            return entry

    def add_image(self, digest: str, data: bytes) -> None:
        self.images.setdefault(digest, data)

    def __len__(self) -> int:
        return len(self.entries)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    def content_digest(self) -> str:
        rows = []
        for e in self.entries:
            d = e.to_dict()
            for k in VOLATILE_FIELDS:
                d.pop(k)
            rows.append(d)
        return hashlib.sha256(canonical_json(rows).encode("utf-8")).hexdigest()


def image_dir_for(path: Path) -> Path:
    return path.with_name(path.name + ".images")


def write_transcript(path: str | Path, transcript: OracleTranscript, save_images: bool = True) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in transcript.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    if save_images and transcript.images:
        img_dir = image_dir_for(path)
        img_dir.mkdir(exist_ok=True)
        for digest, data in transcript.images.items():
            target = img_dir / f"{digest}.png"
            if not target.exists():
                target.write_bytes(data)


def read_transcript(path: str | Path) -> OracleTranscript:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from exc
        for key in ("kind", "prompt", "response", "image_digest"):
            if key not in doc:
                raise LoadError(f"{path}:{lineno}: $.{key} missing")
        entries.append(TranscriptEntry.from_dict(doc))
    for i, e in enumerate(entries):
        if e.index != i:
            raise LoadError(f"{path}: entry {i} has index {e.index}; entries must be strictly ordered")
    return OracleTranscript(entries)
