import json
import struct

import numpy as np
import pytest
import torch

from mfdv2v.checkpoint import load_checkpoint, save_checkpoint
from mfdv2v.tensorio import (
    BadMagicError,
    LengthMismatchError,
    TruncatedPayloadError,
    dumps_tensor,
    loads_tensor,
    read_tensor,
    write_tensor,
)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bitwise(tmp_path, dtype):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(dtype)
    write_tensor(tmp_path / "a.mvt", arr)
    back = read_tensor(tmp_path / "a.mvt")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_scalar_round_trip(tmp_path):
    arr = np.array(3.25, dtype=np.float64)
    write_tensor(tmp_path / "s.mvt", arr)
    back = read_tensor(tmp_path / "s.mvt")
    assert back.shape == () and back == arr


def test_torch_tensor_accepted():
    t = torch.randn(2, 3)
    assert np.array_equal(loads_tensor(dumps_tensor(t)), t.numpy())


def test_layout():
    blob = dumps_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"MVT1"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    assert header == {"dtype": "f32", "shape": [2, 3], "order": "row-major"}
    assert np.array_equal(np.frombuffer(blob[8 + hlen :], dtype="<f4"), np.arange(6))


def _blob_with(shape, n_values):
    header = json.dumps({"dtype": "f32", "shape": shape, "order": "row-major"}).encode()
    return b"MVT1" + struct.pack("<I", len(header)) + header + np.zeros(n_values, "<f4").tobytes()


def test_truncated_payload():
    with pytest.raises(TruncatedPayloadError) as exc:
        loads_tensor(_blob_with([100], 50))
    assert exc.value.code == "truncated"


def test_payload_longer_than_header():
    with pytest.raises(LengthMismatchError) as exc:
        loads_tensor(_blob_with([10], 12))
    assert exc.value.code == "length_mismatch"


def test_bad_magic():
    blob = bytearray(dumps_tensor(np.zeros(3, np.float32)))
    blob[:4] = b"MVT2"
    with pytest.raises(BadMagicError) as exc:
        loads_tensor(bytes(blob))
    assert exc.value.code == "bad_magic"


def test_error_codes_are_distinct():
    assert len({BadMagicError.code, TruncatedPayloadError.code, LengthMismatchError.code}) == 3


def test_truncated_header():
    blob = dumps_tensor(np.zeros(3, np.float32))
    with pytest.raises(TruncatedPayloadError):
        loads_tensor(blob[:10])


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        dumps_tensor(np.array([1.0, np.nan]))


def test_checkpoint_round_trip_and_determinism(tmp_path):
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 2)
    manifest = {"kind": "test", "config": {"a": 1}}
    p1 = save_checkpoint(tmp_path / "one.ckpt", manifest, {"net": lin.state_dict()})
    p2 = save_checkpoint(tmp_path / "two.ckpt", manifest, {"net": lin.state_dict()})
    assert p1.read_bytes() == p2.read_bytes()
    back_manifest, weights = load_checkpoint(p1)
    assert back_manifest["config"] == {"a": 1}
    for k, v in lin.state_dict().items():
        assert torch.equal(weights["net"][k], v)
