"""Binary checkpoint format for parameter stores.

Layout (all integers little-endian):

    magic   8 bytes  b"SSCKPT1\\n"
    flags   u8       bit 0: Adam moments and step counters included
    digest  u16 length + UTF-8 bytes (architecture digest, may be empty)
    count   u32      number of entries
    entry   repeated:
        name    u16 length + UTF-8 bytes
        rank    u8
        shape   rank x u32
        value   prod(shape) float32, little-endian
        if moments flag: m, v (same layout), then step as u64

Values are always written as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct

import numpy as np

from .params import ParamStore

MAGIC = b"SSCKPT1\n"
_FLAG_MOMENTS = 1


class CheckpointError(Exception):
    """Raised on malformed checkpoint files or digest mismatches."""


def save_checkpoint(params: ParamStore, path, digest: str = "",
                    include_moments: bool = False) -> None:
    digest_bytes = digest.encode("utf-8")
    chunks = [MAGIC, struct.pack("<B", _FLAG_MOMENTS if include_moments else 0),
              struct.pack("<H", len(digest_bytes)), digest_bytes,
              struct.pack("<I", len(params))]
    for name, entry in params.items():
        name_bytes = name.encode("utf-8")
        value = np.ascontiguousarray(entry.value, dtype="<f4")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
        if include_moments:
            chunks.append(np.ascontiguousarray(entry.m, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(entry.v, dtype="<f4").tobytes())
            chunks.append(struct.pack("<Q", entry.step))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, str]:
    """Read a checkpoint into a fresh ParamStore; returns (store, digest)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    rd = _Reader(data, path)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    (flags,) = rd.unpack("<B")
    with_moments = bool(flags & _FLAG_MOMENTS)
    (digest_len,) = rd.unpack("<H")
    digest = rd.take(digest_len).decode("utf-8")
    (count,) = rd.unpack("<I")
    params = ParamStore(dtype)
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        value = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape)
        entry = params.add(name, value.astype(dtype))
        if with_moments:
            entry.m = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(dtype)
            entry.v = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(dtype)
            (entry.step,) = rd.unpack("<Q")
    if rd.pos != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint: {path}")
    return params, digest
