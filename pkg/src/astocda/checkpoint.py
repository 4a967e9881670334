"""ASTC tensor container.

Layout (little-endian): magic ``b"ASTC"``, u32 version, u32 tensor count,
then per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, raw f64
payload in row-major order.
"""

import hashlib
import struct

import numpy as np

from .errors import ConfigurationError

MAGIC = b"ASTC"
VERSION = 1


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")  # keeps rank 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise ConfigurationError("not an ASTC container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ConfigurationError(f"unsupported ASTC version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(buf):
        raise ConfigurationError(f"trailing bytes in ASTC container ({len(buf) - off})")
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def checksum(tensors):
    """SHA-256 of the serialized container; stable across runs for equal contents."""
    return hashlib.sha256(dumps(tensors)).hexdigest()
