"""LSF1 binary field container.

Layout: magic ``LSF1``, three little-endian uint32 dims, one uint8 dtype code
(0 = float64 field, 1 = uint8 mask), then raw little-endian data in row-major
order with k fastest. Masks conventionally use the ``.lsm`` suffix.
"""
import struct

import numpy as np

MAGIC = b"LSF1"
FLOAT64 = 0
MASK = 1

_HEADER = struct.Struct("<4sIIIB")


class FormatError(ValueError):
    pass


def encode_field(a):
    a = np.asarray(a)
    if a.ndim != 3:
        raise ValueError(f"LSF1 holds 3D arrays, got shape {a.shape}")
    if a.dtype == bool:
        code, payload = MASK, np.ascontiguousarray(a, dtype=np.uint8)
    else:
        code, payload = FLOAT64, np.ascontiguousarray(a, dtype="<f8")
    return _HEADER.pack(MAGIC, *a.shape, code) + payload.tobytes(order="C")


def decode_field(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated LSF1 header")
    magic, ni, nj, nk, code = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    n = ni * nj * nk
    body = memoryview(buf)[_HEADER.size:]
    if code == FLOAT64:
        dtype, width = np.dtype("<f8"), 8
    elif code == MASK:
        dtype, width = np.dtype(np.uint8), 1
    else:
        raise FormatError(f"unknown LSF1 dtype code {code}")
    if len(body) != n * width:
        raise FormatError(f"LSF1 payload has {len(body)} bytes, expected {n * width}")
    a = np.frombuffer(body, dtype=dtype).reshape(ni, nj, nk)
    if code == MASK:
        if a.max(initial=0) > 1:
            raise FormatError("mask payload contains values other than 0/1")
        return a.astype(bool)
    return a.astype(np.float64)


def write_field(path, a):
    with open(path, "wb") as fh:
        fh.write(encode_field(a))


def read_field(path):
    with open(path, "rb") as fh:
        return decode_field(fh.read())
