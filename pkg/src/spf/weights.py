"""Binary tensor container (.w32).

Layout, all little-endian:
  magic "SPFW" | u16 version=1 | u32 count
  per entry: u16 name_len | name utf-8 | u8 rank=4 | 4x u32 extents | f32 payload
Round-trips must be bit-exact, so payloads are written straight from the
float32 buffers with no re-encoding.
"""

import struct
from collections import OrderedDict

import numpy as np

from .errors import ShapeError, SpfError

MAGIC = b"SPFW"
VERSION = 1


def save_tensors(path, tensors):
    """Write an ordered name -> 4-D float32 array mapping to `path`."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.ndim != 4:
                raise ShapeError(f"tensor {name!r} must be rank 4, got shape {arr.shape}")
            if arr.dtype != np.float32:
                raise ShapeError(f"tensor {name!r} must be float32, got {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", 4))
            fh.write(struct.pack("<4I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Read a .w32 file back into an OrderedDict of float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise SpfError(f"truncated weight file {path} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise SpfError(f"{path} is not a weight file (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise SpfError(f"unsupported weight file version {version} in {path}")
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        if rank != 4:
            raise SpfError(f"tensor {name!r} in {path} has rank {rank}, expected 4")
        shape = struct.unpack("<4I", take(16))
        n_items = int(np.prod([int(s) for s in shape], dtype=np.int64))
        raw = take(4 * n_items)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise SpfError(f"{len(data) - pos} trailing bytes in weight file {path}")
    return out


def save_parameters(path, params):
    """Persist nn.Parameter objects; linear/bias entries are padded to rank 4."""
    tensors = OrderedDict()
    for p in params:
        v = p.value
        if v.ndim < 4:
            v = v.reshape(v.shape + (1,) * (4 - v.ndim))
        tensors[p.name] = v.astype(np.float32, copy=False)
    save_tensors(path, tensors)


def load_into_parameters(path, params):
    """Load a .w32 file into existing Parameters, matching by name."""
    tensors = load_tensors(path)
    for p in params:
        if p.name not in tensors:
            raise SpfError(f"weight file {path} is missing parameter {p.name!r}")
        v = tensors[p.name].reshape(p.value.shape)
        p.value = v.astype(p.value.dtype, copy=False)
        p.grad = np.zeros_like(p.value)
    extra = set(tensors) - {p.name for p in params}
    if extra:
        raise SpfError(f"weight file {path} has unexpected tensors: {sorted(extra)}")
