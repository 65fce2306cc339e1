"""Binary parameter checkpoints.

Layout (little-endian throughout):

    magic   4 bytes  b"OLEO"
    version u32
    count   u32      number of parameters
    per parameter:
        name_len u32, name UTF-8
        rank     u32, dims rank*u64
        payload  prod(dims) * f64
"""

import hashlib
import struct

import numpy as np

MAGIC = b"OLEO"
VERSION = 1


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated, or of the wrong format."""


def save_params(path, named_arrays):
    """Write an ordered mapping of name -> float64 ndarray."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8", copy=False).tobytes())


def _read(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def load_params(path):
    """Read a checkpoint back into an ordered dict of name -> ndarray."""
    out = {}
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a parameter checkpoint")
        version, count = struct.unpack("<II", _read(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read(f, 8 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            payload = _read(f, 8 * n, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} parameters")
    return out


def file_sha256(path):
    """SHA-256 digest (32 raw bytes) of a file, used for provenance."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()
