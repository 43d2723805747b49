"""Image, depth, manifest, annotation, transcript and config file handling."""

from __future__ import annotations

import hashlib
import io as _bytesio
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class LoadError(ValueError):
    """A file could not be read or does not match its expected schema."""


def image_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_png(image: np.ndarray) -> bytes:
    buf = _bytesio.BytesIO()
    # light compression: these bytes are sent once and hashed, not archived
    Image.fromarray(np.asarray(image)).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png_rgb(data: bytes, where: str = "image") -> np.ndarray:
    header = _header_of(data[:33])
    if header is not None and header[0] == 16:
        raise LoadError(f"{where}: unsupported bit depth 16 for an RGB image")
    try:
        with Image.open(_bytesio.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except Exception as exc:
        raise LoadError(f"{where}: {exc}") from exc


def _png_header(path: Path) -> tuple[int, int] | None:
    """(bit depth, color type) from the IHDR chunk, or None if not a PNG."""
    with open(path, "rb") as fh:
        return _header_of(fh.read(33))


def _header_of(head: bytes) -> tuple[int, int] | None:
    if not head.startswith(PNG_SIGNATURE) or head[12:16] != b"IHDR":
        return None
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def load_rgb(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: no such file")
    header = _png_header(path)
    if header is not None and header[0] == 16:
        raise LoadError(f"{path}: unsupported bit depth 16 for an RGB image")
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise LoadError(f"{path}: unsupported image mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except LoadError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise LoadError(f"{path}: {exc}") from exc


def save_rgb(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(image))


@dataclass(frozen=True)
class DepthMap:
    """Depth in millimeters; 0 marks an invalid pixel."""

    values: np.ndarray  # float64, NaN where invalid

    @classmethod
    def from_millimeters(cls, mm: np.ndarray) -> DepthMap:
        arr = np.asarray(mm, dtype=np.float64).copy()
        arr[~np.isfinite(arr) | (arr <= 0)] = np.nan
        if np.any(arr[np.isfinite(arr)] >= 65535):
            raise LoadError("depth values must be below 65535 mm")
        arr.setflags(write=False)
        return cls(arr)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    def to_uint16(self) -> np.ndarray:
        return np.where(self.valid, np.rint(np.nan_to_num(self.values)), 0).astype(np.uint16)


def load_depth(path: str | Path) -> DepthMap:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: no such file")
    return decode_depth_png(path.read_bytes(), where=str(path))


def decode_depth_png(data: bytes, where: str = "depth") -> DepthMap:
    """Decode a 16-bit single-channel PNG holding millimeters (0 = invalid)."""
    header = _header_of(data[:33])
    if header is None:
        raise LoadError(f"{where}: depth maps must be PNG")
    bit_depth, color_type = header
    if bit_depth != 16 or color_type != 0:
        raise LoadError(
            f"{where}: depth must be 16-bit single-channel PNG "
            f"(got bit depth {bit_depth}, color type {color_type})"
        )
    with Image.open(_bytesio.BytesIO(data)) as im:
        arr = np.asarray(im, dtype=np.uint16 if im.mode == "I;16" else None)
    return DepthMap.from_millimeters(arr.astype(np.float64))


def encode_depth_png(depth: DepthMap | np.ndarray) -> bytes:
    arr = depth.to_uint16() if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.uint16)
    buf = _bytesio.BytesIO()
    Image.fromarray(arr.astype("<u2")).save(buf, format="PNG")
    return buf.getvalue()


def save_depth(path: str | Path, depth: DepthMap | np.ndarray) -> None:
    Path(path).write_bytes(encode_depth_png(depth))


# ---------------------------------------------------------------------------
# JSON documents


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _require(doc: dict, key: str, types: type | tuple, where: str) -> Any:
    if key not in doc:
        raise LoadError(f"{where}.{key}: missing")
    val = doc[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise LoadError(f"{where}.{key}: expected {types}, got {type(val).__name__}")
    return val


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: Path
    depth: Path | None = None
    annotation: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path

    def to_dict(self) -> dict:
        rows = []
        for e in self.entries:
            row = {"id": e.id, "image": _rel(e.image, self.root)}
            if e.depth is not None:
                row["depth"] = _rel(e.depth, self.root)
            if e.annotation is not None:
                row["annotation"] = _rel(e.annotation, self.root)
            rows.append(row)
        return {"entries": rows}


def _rel(p: Path, root: Path) -> str:
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    root = path.parent.resolve()
    rows = _require(doc, "entries", list, "$")
    seen: set[str] = set()
    entries = []
    for i, row in enumerate(rows):
        where = f"$.entries[{i}]"
        if not isinstance(row, dict):
            raise LoadError(f"{where}: expected object")
        ident = _require(row, "id", str, where)
        if ident in seen:
            raise LoadError(f"{where}.id: duplicate id {ident!r}")
        seen.add(ident)
        paths = {}
        for key in ("image", "depth", "annotation"):
            if key == "image" or key in row:
                rel = _require(row, key, str, where)
                full = root / rel
                if not full.is_file():
                    raise LoadError(f"{where}.{key}: file not found: {full}")
                paths[key] = full
        entries.append(ManifestEntry(ident, paths["image"], paths.get("depth"), paths.get("annotation")))
    return DatasetManifest(tuple(entries), root)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(canonical_json(manifest.to_dict()), encoding="utf-8")


# ---------------------------------------------------------------------------
# config


def load_config_file(path: str | Path) -> dict:
    """Read a YAML (or JSON) config file into nested dicts."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise LoadError(f"{path}: top level must be a mapping")
    return doc
