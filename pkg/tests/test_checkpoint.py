import json
import struct

import numpy as np
import pytest

from mome.backbone import ModelConfig, MoMETransformer
from mome.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from mome.errors import DataIntegrityError, FormatError, VersionError


@pytest.fixture(scope="module")
def ckpt():
    m = MoMETransformer(ModelConfig(), seed=2)
    return Checkpoint(ModelConfig().to_dict(), m.arrays(), "vision", 17, 2, {"history": [{"stage": "vision"}]})


def _split(raw):
    _, _, n = struct.unpack_from("<4sIQ", raw)
    return raw[:16], json.loads(raw[16:16 + n]), raw[16 + n:]


def _join(meta, payload):
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<4sIQ", b"VLMO", 1, len(body)) + body + payload


def test_round_trip_is_byte_exact(tmp_path, ckpt):
    p = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(p)
    assert back.equal(ckpt)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_header_layout(ckpt):
    raw = to_bytes(ckpt)
    head, meta, payload = _split(raw)
    assert head[:4] == b"VLMO" and struct.unpack_from("<I", head, 4)[0] == 1
    entry = meta["manifest"]["img.cls"]
    arr = np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["length"]], "<f4")
    assert arr.tobytes() == ckpt.params["img.cls"].astype("<f4").tobytes()
    assert meta["stage"] == "vision" and meta["step"] == 17


def test_bad_magic(ckpt):
    raw = bytearray(to_bytes(ckpt))
    raw[0] ^= 0xFF
    with pytest.raises(FormatError):
        from_bytes(bytes(raw))


def test_version_mismatch(ckpt):
    raw = bytearray(to_bytes(ckpt))
    struct.pack_into("<I", raw, 4, 2)
    with pytest.raises(VersionError):
        from_bytes(bytes(raw))


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncation(ckpt, cut):
    raw = to_bytes(ckpt)
    with pytest.raises(DataIntegrityError):
        from_bytes(raw[:cut])


def test_manifest_overlap(ckpt):
    _, meta, payload = _split(to_bytes(ckpt))
    names = sorted(meta["manifest"])
    meta["manifest"][names[1]]["offset"] -= 4
    with pytest.raises(DataIntegrityError, match="overlap"):
        from_bytes(_join(meta, payload))


def test_manifest_shape_mismatch(ckpt):
    _, meta, payload = _split(to_bytes(ckpt))
    meta["manifest"]["img.cls"]["shape"] = [3]
    with pytest.raises(DataIntegrityError):
        from_bytes(_join(meta, payload))


def test_missing_file(tmp_path):
    with pytest.raises(DataIntegrityError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_equal_detects_single_bit(ckpt):
    other = Checkpoint(ckpt.config, {n: a.copy() for n, a in ckpt.params.items()}, ckpt.stage, ckpt.step,
                       ckpt.seed, ckpt.extra)
    assert other.equal(ckpt)
    other.params["img.cls"].view(np.uint32)[0] ^= 1
    assert not other.equal(ckpt)
