"""Binary checkpoint format.

Layout (all integers little-endian):

    magic      7 bytes   b"2MNER1\\n"
    version    uint32    currently 1
    records    repeated  name_len uint32 | name utf-8 | rank uint32
                         | dims uint32 x rank | payload float32 x prod(dims)
    checksum   uint64    FNV-1a over every record byte

Parameters are stored at float32 precision; saving canonicalizes the live
tensors to the same precision so that a save -> load round trip (and any
later re-save) reproduces forward outputs bit for bit. The checksum is
verified on load and any mismatch, truncation, or bad header is an error.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mmner.autodiff import Tensor

MAGIC = b"2MNER1\n"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class CheckpointError(ValueError):
    """Unreadable, corrupt, or mismatched checkpoint file."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(params: dict[str, Tensor], path: str | Path) -> None:
    """Write named parameters; see module docstring for the format.

    Side effect: each tensor's data is rounded to float32 precision (the
    checkpoint is the source of truth for parameter values).
    """
    records = bytearray()
    for name in sorted(params):
        tensor = params[name]
        tensor.data = tensor.data.astype(np.float32).astype(np.float64)
        name_bytes = name.encode("utf-8")
        records += struct.pack("<I", len(name_bytes))
        records += name_bytes
        records += struct.pack("<I", tensor.data.ndim)
        for dim in tensor.shape:
            records += struct.pack("<I", dim)
        records += tensor.data.astype("<f4").tobytes()
    blob = MAGIC + struct.pack("<I", VERSION) + bytes(records)
    blob += struct.pack("<Q", fnv1a_64(bytes(records)))
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into float64 arrays, verifying the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    records = blob[len(MAGIC) + 4:-8]
    (stored_sum,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if fnv1a_64(records) != stored_sum:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")

    params: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(records):
        try:
            (name_len,) = struct.unpack_from("<I", records, pos)
            pos += 4
            name = records[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", records, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", records, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(records, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated record ({exc})") from None
        params[name] = payload.astype(np.float64).reshape(dims)
    return params
