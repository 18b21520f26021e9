"""Binary checkpoint format.

Layout::

    b"VLMO" | version u32 LE | metadata length u64 LE | metadata (UTF-8 JSON) | payload

The metadata carries the model config, stage, step, seed, free-form extras
and a manifest ``name -> {dtype, shape, offset, length}`` addressing float32
little-endian row-major tensors in the payload. Offsets are relative to the
payload start.
"""
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIntegrityError, FormatError, VersionError

MAGIC = b"VLMO"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPE = "<f4"


@dataclass
class Checkpoint:
    config: dict
    params: dict                    # name -> float32 ndarray
    stage: str = "init"
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def equal(self, other):
        """Bitwise equality of metadata and every tensor."""
        if (self.config, self.stage, self.step, self.seed, self.extra) != \
                (other.config, other.stage, other.step, other.seed, other.extra):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(_as_f4(self.params[n]).tobytes() == _as_f4(other.params[n]).tobytes()
                   for n in self.params)


def _as_f4(arr):
    return np.ascontiguousarray(arr, dtype=_DTYPE)


def to_bytes(ckpt):
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.params):
        blob = _as_f4(ckpt.params[name]).tobytes()
        manifest[name] = {"dtype": "float32", "shape": list(np.shape(ckpt.params[name])),
                          "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    meta = {"config": ckpt.config, "stage": ckpt.stage, "step": int(ckpt.step),
            "seed": int(ckpt.seed), "extra": ckpt.extra, "manifest": manifest}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)


def _check_manifest(manifest, payload_len):
    spans = []
    for name, entry in manifest.items():
        if entry.get("dtype") != "float32":
            raise DataIntegrityError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["length"] != 4 * count:
            raise DataIntegrityError(f"{name}: length {entry['length']} does not match shape {entry['shape']}")
        spans.append((entry["offset"], entry["offset"] + entry["length"], name))
    spans.sort()
    pos = 0
    for start, end, name in spans:
        if start < pos:
            raise DataIntegrityError(f"manifest entry {name} overlaps the previous tensor")
        if start > pos:
            raise DataIntegrityError(f"payload gap before {name}")
        pos = end
    if pos != payload_len:
        raise DataIntegrityError(f"manifest covers {pos} bytes, payload has {payload_len}")


def from_bytes(raw):
    if len(raw) < _PREFIX.size:
        raise FormatError("checkpoint truncated inside the header")
    magic, version, meta_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + meta_len
    if len(raw) < start:
        raise FormatError("checkpoint truncated inside the metadata")
    try:
        meta = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from exc
    payload = memoryview(raw)[start:]
    manifest = meta["manifest"]
    _check_manifest(manifest, len(payload))
    params = {}
    for name, entry in manifest.items():
        chunk = payload[entry["offset"]: entry["offset"] + entry["length"]]
        params[name] = np.frombuffer(chunk, dtype=_DTYPE).reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(meta["config"], params, meta["stage"], meta["step"], meta["seed"], meta.get("extra", {}))


def save_checkpoint(ckpt, path):
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataIntegrityError(f"checkpoint not found: {path}") from exc
    return from_bytes(raw)
