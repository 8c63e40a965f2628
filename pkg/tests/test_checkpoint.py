import hashlib
import json
import struct

import numpy as np
import pytest

from fecnet.checkpoint import (MAGIC, VERSION, decode_checkpoint, encode_checkpoint,
                               load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint)
from fecnet.errors import ConfigurationError, CorruptCheckpointError
from fecnet.model import build_model, fec_micro

# digest of the table below, generated once and frozen
GOLDEN_SHA256 = "c8cdc68fcc3a19697d9893b9d3acb60035a2c442b215c5f69d5e70a3d96e6553"


def golden_table():
    return {
        "layer.weight": (np.arange(80, dtype=np.float32).reshape(8, 10) - 40) / np.float32(16),
        "layer.bias": np.linspace(-1, 1, 20),
    }


def test_golden_digest_is_stable(tmp_path):
    table = golden_table()
    assert sum(a.size for a in table.values()) == 100
    digest = write_checkpoint(tmp_path / "g.fecw", {"name": "golden", "params": 100}, table,
                              {"note": "frozen"})
    assert digest == GOLDEN_SHA256
    assert hashlib.sha256((tmp_path / "g.fecw").read_bytes()[:-32]).hexdigest() == digest


def test_layout_parsed_by_hand():
    blob = encode_checkpoint({"k": 1}, {"w": np.array([[1.5, -2.0]], dtype=np.float32)}, {"m": "x"})
    assert blob[:4] == MAGIC
    assert struct.unpack("<H", blob[4:6])[0] == VERSION
    pos = 6
    (n,) = struct.unpack("<I", blob[pos:pos + 4])
    assert json.loads(blob[pos + 4:pos + 4 + n]) == {"k": 1}
    pos += 4 + n
    (n,) = struct.unpack("<I", blob[pos:pos + 4])
    assert json.loads(blob[pos + 4:pos + 4 + n]) == {"m": "x"}
    pos += 4 + n
    assert struct.unpack("<I", blob[pos:pos + 4])[0] == 1
    pos += 4
    (n,) = struct.unpack("<H", blob[pos:pos + 2])
    assert blob[pos + 2:pos + 2 + n] == b"w"
    pos += 2 + n
    assert struct.unpack("<BB", blob[pos:pos + 2]) == (1, 2)
    assert struct.unpack("<2I", blob[pos + 2:pos + 10]) == (1, 2)
    pos += 10
    assert struct.unpack("<2f", blob[pos:pos + 8]) == (1.5, -2.0)
    assert len(blob) == pos + 8 + 32


def test_round_trip_is_bit_exact(tmp_path):
    model = build_model(fec_micro(seed=2))
    model.meta = {"normalization": {"mean": [0.1] * 3, "std": [0.3] * 3}}
    save_checkpoint(model, tmp_path / "m.fecw")
    again = load_checkpoint(tmp_path / "m.fecw", expected_config=model.config)
    for (k, a), (k2, b) in zip(model.state_dict().items(), again.state_dict().items()):
        assert k == k2 and a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    x = np.random.default_rng(0).normal(size=(2, 3, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(model(x)[0].data, again(x)[0].data)
    assert again.meta == model.meta


def test_float64_tensors_survive(tmp_path):
    arr = np.random.default_rng(1).normal(size=(3, 4))
    write_checkpoint(tmp_path / "f.fecw", {}, {"x": arr})
    _, _, tensors = read_checkpoint(tmp_path / "f.fecw")
    assert tensors["x"].dtype == np.float64
    np.testing.assert_array_equal(tensors["x"], arr)


@pytest.mark.parametrize("cut", [1, 10, 40, 200])
def test_truncated_file_is_corrupt(tmp_path, cut):
    blob = encode_checkpoint({"a": 1}, golden_table())
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(blob[:-cut])


def test_flipped_byte_is_corrupt():
    blob = bytearray(encode_checkpoint({"a": 1}, golden_table()))
    blob[60] ^= 0xFF
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        decode_checkpoint(bytes(blob))


def test_bad_magic_and_version():
    with pytest.raises(CorruptCheckpointError, match="magic"):
        decode_checkpoint(b"NOPE" + bytes(64))
    body = MAGIC + struct.pack("<H", 99) + bytes(12)
    with pytest.raises(CorruptCheckpointError, match="version"):
        decode_checkpoint(body + hashlib.sha256(body).digest())


def test_config_mismatch_is_reported(tmp_path):
    save_checkpoint(build_model(fec_micro()), tmp_path / "m.fecw")
    with pytest.raises(ConfigurationError, match="num_classes"):
        load_checkpoint(tmp_path / "m.fecw", expected_config=fec_micro(num_classes=3))


def test_unsupported_dtype_rejected():
    with pytest.raises(ConfigurationError):
        encode_checkpoint({}, {"i": np.arange(3)})
