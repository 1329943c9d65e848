"""Binary serialization: "AFT1" raw tensors and "AFCK" named-tensor checkpoints.

AFT1: magic ``AFT1`` | u32 LE rank | rank x u32 LE extents | float32 LE
payload, row-major. AFCK: magic ``AFCK`` followed by records of
u32 LE name length | utf-8 name | one AFT1 tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import RasterParseError

AFT1_MAGIC = b"AFT1"
AFCK_MAGIC = b"AFCK"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = AFT1_MAGIC + struct.pack("<I", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one AFT1 record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != AFT1_MAGIC:
        raise RasterParseError(f"bad AFT1 magic at byte {offset}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise RasterParseError(f"truncated AFT1 rank field at byte {pos}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank > 32:
        raise RasterParseError(f"implausible AFT1 rank {rank} at byte {offset + 4}")
    if len(buf) < pos + 4 * rank:
        raise RasterParseError(f"truncated AFT1 extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if len(buf) < pos + nbytes:
        raise RasterParseError(
            f"truncated AFT1 payload at byte {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float32), pos + nbytes


def save_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, pos = tensor_from_bytes(buf)
    if pos != len(buf):
        raise RasterParseError(f"trailing bytes after AFT1 payload at byte {pos}")
    return arr


def save_checkpoint(named: dict[str, np.ndarray], path) -> None:
    """Write an AFCK file; iteration order of ``named`` is preserved."""
    chunks = [AFCK_MAGIC]
    for name, arr in named.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(tensor_to_bytes(arr))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != AFCK_MAGIC:
        raise RasterParseError("bad AFCK magic at byte 0")
    pos = 4
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        if len(buf) < pos + 4:
            raise RasterParseError(f"truncated AFCK name length at byte {pos}")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + nlen:
            raise RasterParseError(f"truncated AFCK name at byte {pos}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(buf, pos)
        out[name] = arr
    return out
