"""CYTR1 tensor files and the checkpoint container built on them.

Record layout: ``b"CYTR1"``, u8 rank, rank x u32 LE extents, then
product(extents) x f32 LE row-major values.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CYTR1"
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError("rank does not fit in a byte")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 5] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}")
    pos = offset + 5
    if pos >= len(buf):
        raise FormatError("truncated header")
    rank = buf[pos]
    pos += 1
    if pos + 4 * rank > len(buf):
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=_F32, count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, end


def write_tensor(path, array) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


# ---------------------------------------------------------- checkpoints
#
# <name>.ckpt holds concatenated CYTR1 records; <name>.ckpt.index is text:
#   "# key = value" metadata lines, then "id offset d0xd1x..." per tensor.

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    lines = [f"# {k} = {v}" for k, v in (meta or {}).items()]
    for tid, arr in tensors.items():
        if any(c.isspace() for c in tid):
            raise FormatError(f"tensor id {tid!r} contains whitespace")
        offset = blob.tell()
        blob.write(encode(arr))
        shape = "x".join(str(s) for s in np.shape(arr)) or "scalar"
        lines.append(f"{tid} {offset} {shape}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob.getvalue())
    os.replace(tmp, path)
    index = Path(str(path) + ".index")
    index.write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    buf = path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in Path(str(path) + ".index").read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        tid, offset, shape = line.split()
        arr, _ = decode(buf, int(offset))
        expected = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != expected:
            raise FormatError(f"{tid}: index says {expected}, record holds {arr.shape}")
        tensors[tid] = arr
    return tensors, meta
