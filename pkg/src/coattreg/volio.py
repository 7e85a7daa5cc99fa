"""RVOL1 volume files and manifest+blob checkpoints.

RVOL1 stores a volume as ``<stem>.json`` (header) and ``<stem>.raw``
(little-endian float32 payload). The payload is channel-innermost, then x,
y, z: the value of channel ``c`` at voxel ``(x, y, z)`` lives at float index
``c + C * (x + W * (y + H * z))``.

Checkpoints are ``<path>.json`` (manifest: tensor names, shapes, byte
offsets and lengths, plus free-form metadata) and ``<path>.bin`` (the
concatenated float32 little-endian tensors).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

MAGIC = "RVOL1"
DTYPE = "f32le"
ORDER = "c,x,y,z"
CHECKPOINT_FORMAT = "RCKPT1"
_F32 = np.dtype("<f4")


@dataclass
class Volume:
    """Multi-channel volume, ``data`` laid out as ``C x W x H x D``."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"volume data must be C x W x H x D, got shape {data.shape}")
        self.data = data
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise DataError(f"spacing_mm must be three positive values, got {self.spacing_mm}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw", ".bin"):
        path = path.with_suffix("")
    return path


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def write_volume(volume: Volume, stem) -> tuple[Path, Path]:
    stem = _stem(stem)
    w, h, d = volume.shape
    header = {
        "magic": MAGIC,
        "shape": [w, h, d],
        "channels": volume.channels,
        "spacing_mm": list(volume.spacing_mm),
        "dtype": DTYPE,
        "order": ORDER,
    }
    payload = np.ascontiguousarray(volume.data.transpose(3, 2, 1, 0), dtype=_F32).tobytes()
    header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    header_path.write_text(_dump_json(header))
    raw_path.write_bytes(payload)
    return header_path, raw_path


def _field(header: dict, name: str, check, message: str):
    if name not in header:
        raise DataError(f"RVOL1 header lacks field '{name}'")
    value = header[name]
    if not check(value):
        raise DataError(f"RVOL1 header field '{name}' {message}, got {value!r}")
    return value


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def read_volume(stem) -> Volume:
    stem = _stem(stem)
    header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{header_path}: malformed header ({exc.msg})") from exc
    if not isinstance(header, dict):
        raise DataError(f"{header_path}: header must be a JSON object")
    _field(header, "magic", lambda v: v == MAGIC, f"must be {MAGIC!r}")
    _field(header, "dtype", lambda v: v == DTYPE, f"must be {DTYPE!r}")
    if "order" in header:
        _field(header, "order", lambda v: v == ORDER, f"must be {ORDER!r}")
    shape = _field(header, "shape", lambda v: isinstance(v, list) and len(v) == 3 and all(_is_int(x) and x > 0 for x in v),
                   "must be three positive integers")
    channels = _field(header, "channels", lambda v: _is_int(v) and v > 0, "must be a positive integer")
    spacing = _field(header, "spacing_mm",
                     lambda v: isinstance(v, list) and len(v) == 3
                     and all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in v),
                     "must be three positive numbers")
    raw = raw_path.read_bytes()
    expected = int(np.prod(shape)) * channels * _F32.itemsize
    if len(raw) != expected:
        raise DataError(f"{raw_path}: byte count {len(raw)} does not match header shape/channels ({expected} expected)")
    w, h, d = shape
    data = np.frombuffer(raw, dtype=_F32).reshape(d, h, w, channels).transpose(3, 2, 1, 0)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{raw_path}: payload contains non-finite values")
    return Volume(np.ascontiguousarray(data, dtype=np.float32), tuple(float(s) for s in spacing))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_save(path, tensors: dict[str, np.ndarray], meta: dict) -> tuple[Path, Path]:
    """Write ``tensors`` (in insertion order) and ``meta`` to ``<path>.json/.bin``.

    Both files are first written under a temporary name and then renamed, so
    an interrupted save never clobbers an existing checkpoint.
    """
    stem = _stem(path)
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype=_F32)
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format": CHECKPOINT_FORMAT, "tensors": entries, "meta": meta}
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    tmp_json, tmp_bin = Path(f"{json_path}.tmp"), Path(f"{bin_path}.tmp")
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_json.write_text(_dump_json(manifest))
    os.replace(tmp_bin, bin_path)
    os.replace(tmp_json, json_path)
    return json_path, bin_path


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ``(name -> float32 array, meta)``."""
    stem = _stem(path)
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    try:
        manifest = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{json_path}: malformed manifest ({exc.msg})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{json_path}: field 'format' must be {CHECKPOINT_FORMAT!r}")
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise DataError(f"{json_path}: field 'tensors' must be a list")
    blob = bin_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name, shape, offset, length = entry["name"], entry["shape"], entry["offset"], entry["length"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{json_path}: tensor entry {entry!r} lacks field {exc}") from exc
        if name in tensors:
            raise DataError(f"{json_path}: tensor '{name}' listed twice")
        if not (isinstance(shape, list) and all(_is_int(s) and s >= 0 for s in shape)):
            raise DataError(f"{json_path}: tensor '{name}' has invalid shape {shape!r}")
        if not (_is_int(offset) and _is_int(length) and offset >= 0 and length >= 0):
            raise DataError(f"{json_path}: tensor '{name}' has invalid offset/length")
        if length != int(np.prod(shape)) * _F32.itemsize:
            raise DataError(f"{json_path}: tensor '{name}' length {length} does not match shape {shape}")
        if offset + length > len(blob):
            raise DataError(f"{bin_path}: tensor '{name}' extends past the end of the blob (truncated file?)")
        tensors[name] = np.frombuffer(blob, dtype=_F32, count=length // 4, offset=offset).reshape(shape).copy()
    meta = manifest.get("meta", {})
    if not isinstance(meta, dict):
        raise DataError(f"{json_path}: field 'meta' must be an object")
    return tensors, meta
