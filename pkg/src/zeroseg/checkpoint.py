"""Binary checkpoints: the config snapshot plus every trainable tensor.

Layout, all integers little-endian:

    magic   5 bytes  b"LDVC1"
    u32     format version (1)
    u32     config text length, then that many UTF-8 bytes
    u32     tensor count
    per tensor:
        u16     name length, then that many UTF-8 bytes
        u8      dtype tag: 0 = float32, 1 = float64
        u8      rank
        u32[r]  extents
        raw little-endian payload

Frozen parameters are not stored; they are regenerated from the seed in the
config snapshot, so a load into a freshly built model restores the full
state bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LDVC1"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, config_text: str, named: list) -> None:
    """``named`` is an ordered list of (name, Tensor) pairs."""
    seen = set()
    for name, _ in named:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            # note: ascontiguousarray would promote 0-d arrays to 1-d
            data = t.data if t.data.flags.c_contiguous else t.data.copy()
            if data.dtype not in _DTYPE_TAGS:
                raise ValueError(f"{name}: unsupported dtype {data.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_TAGS[data.dtype], data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Returns (config_text, {name: ndarray}) preserving tensor order."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(5) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    config_text = r.take(clen).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor {name!r}")
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True).reshape(shape)
    if r.off != len(r.blob):
        raise ValueError(f"{path}: trailing bytes after checkpoint")
    return config_text, tensors


def load_checkpoint(path, named: list) -> str:
    """Loads stored values into the (name, Tensor) pairs in place; the name
    sets must match exactly. Returns the stored config text."""
    config_text, stored = read_checkpoint(path)
    want = {name for name, _ in named}
    if want != set(stored):
        missing = sorted(set(stored) - want)
        extra = sorted(want - set(stored))
        raise ValueError(f"{path}: tensor sets differ "
                         f"(unmatched in file: {missing}, in model: {extra})")
    for name, t in named:
        src = stored[name]
        if src.shape != t.data.shape or src.dtype != t.data.dtype:
            raise ValueError(f"{path}: {name} is {src.dtype}{src.shape}, "
                             f"model wants {t.data.dtype}{t.data.shape}")
        t.data = src.copy()
    return config_text
