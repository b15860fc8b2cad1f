"""MVT1 raw tensor files.

Layout: the 4-byte magic ``MVT1``, a little-endian uint32 header length,
a UTF-8 JSON header ``{"dtype", "shape", "order"}``, then the raw
little-endian row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVT1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class TensorFormatError(ValueError):
    code = "format"


class BadMagicError(TensorFormatError):
    code = "bad_magic"


class TruncatedPayloadError(TensorFormatError):
    code = "truncated"


class LengthMismatchError(TensorFormatError):
    code = "length_mismatch"


def _as_array(tensor) -> np.ndarray:
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    arr = np.asarray(tensor)
    if arr.dtype not in _NAMES:
        if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            arr = arr.astype(np.float32)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}")
    return arr


def dumps_tensor(tensor) -> bytes:
    arr = _as_array(tensor)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    name = _NAMES[arr.dtype]
    header = json.dumps({"dtype": name, "shape": list(arr.shape), "order": "row-major"}, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayloadError("file ends inside the header length")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedPayloadError("file ends inside the header")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        shape = tuple(int(s) for s in header["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise TensorFormatError(f"malformed header: {exc}") from exc
    if header.get("order", "row-major") != "row-major":
        raise TensorFormatError(f"unsupported order {header['order']!r}")
    payload = blob[8 + hlen :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise LengthMismatchError(f"payload has {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(dumps_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
