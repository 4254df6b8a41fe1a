"""Binary checkpoint container shared by every trained artifact.

Layout (all integers little-endian):
    magic "HTC1"
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
                u8 dtype code (0 = float32, 1 = float64), raw row-major payload
    u32 metadata length, UTF-8 "key=value" lines (may be empty)

Round-trips are bit-exact; artifact identity is the SHA-256 of the file.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HTC1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save(path, tensors, metadata=None):
    """Write name -> ndarray plus a flat str -> str metadata dict."""
    path = Path(path)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        out += struct.pack("<B", _CODE_FOR[arr.dtype])
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    meta_text = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items())
    mb = meta_text.encode("utf-8")
    out += struct.pack("<I", len(mb))
    out += mb
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
    return path


def load(path):
    """Read a container; returns (tensors dict, metadata dict)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
        off += 8 * rank
        (code,) = struct.unpack_from("<B", buf, off)
        off += 1
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code} for {name}")
        dtype = _DTYPE_CODES[code]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * dtype.itemsize
        tensors[name] = arr.copy()
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta_text = buf[off:off + mlen].decode("utf-8")
    metadata = {}
    for line in meta_text.splitlines():
        if line:
            k, _, v = line.partition("=")
            metadata[k] = v
    return tensors, metadata


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
