"""Binary tensor fragments.

Each fragment is ``u32 name_len | utf-8 name | u32 rank | u64 extents[rank] |
f64 data[prod(extents)]``, all little-endian, data in row-major order.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Mapping

import numpy as np


class FragmentError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_fragment(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FragmentError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", pos)
    return buf


def read_fragment(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
    pos = fh.tell()
    try:
        name = _read_exact(fh, nlen, "name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FragmentError("name is not valid utf-8", pos) from exc
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    if rank > 16:
        raise FragmentError(f"implausible rank {rank}", fh.tell() - 4)
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count, f"data of {name!r}"), dtype="<f8")
    return name, data.reshape(shape).astype(np.float64)


def write_fragments(fh: BinaryIO, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    fh.write(struct.pack("<Q", len(items)))
    for name, arr in items:
        write_fragment(fh, name, arr)


def read_fragments(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, "fragment count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        pos = fh.tell()
        name, arr = read_fragment(fh)
        if name in out:
            raise FragmentError(f"duplicate tensor name {name!r}", pos)
        out[name] = arr
    return out
