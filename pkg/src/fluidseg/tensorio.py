"""FTEN: a minimal binary tensor container.

Layout, all little-endian: magic "FTEN", u16 version, u8 dtype code, u8 rank,
rank u32 dims, then the raw payload.  Supported dtypes: float64 (1),
float32 (2), int32 (3), uint8 (4).
"""

import struct

import numpy as np

from .errors import FormatError

_MAGIC = b"FTEN"
_VERSION = 1

_CODE_TO_DTYPE = {1: "<f8", 2: "<f4", 3: "<i4", 4: "|u1"}
_KIND_TO_CODE = {"f8": 1, "f4": 2, "i4": 3, "u1": 4}


def save_tensor(path, arr: np.ndarray):
    arr = np.asarray(arr)
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    code = _KIND_TO_CODE.get(key)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for FTEN")
    dims = arr.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HBB", _VERSION, code, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        f.write(np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code]).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not an FTEN file")
    version, code, rank = struct.unpack_from("<HBB", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported FTEN version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = 8
    if len(raw) < off + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
    off += 4 * rank
    dtype = np.dtype(_CODE_TO_DTYPE[code])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = raw[off : off + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
