"""Checkpoint files: ``b"DAAL" | u32 version | 32-byte config hash | tensor fragments``.

The run configuration travels inside the fragment block as ``meta.config``
(its UTF-8 bytes stored one per float), so evaluation can rebuild the model
without a separate config file.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from ..ndnum import FragmentError, read_fragments, write_fragments
from .config import RunConfig, parse_config

MAGIC = b"DAAL"
VERSION = 1
HEADER = len(MAGIC) + 4 + 32
CONFIG_KEY = "meta.config"


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int, path: str | Path | None = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.float64).astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path: str | Path, config: RunConfig, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically: a crash mid-write never leaves a truncated file under ``path``."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(config.config_hash())
    items = {CONFIG_KEY: encode_text(config.serialize())}
    items.update(tensors)
    write_fragments(buf, items)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[bytes, RunConfig, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER:
        raise CheckpointError(f"file too short for a header ({len(raw)} bytes)", len(raw), path)
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}", 0, path)
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4, path)
    digest = raw[8:HEADER]
    fh = io.BytesIO(raw)
    fh.seek(HEADER)
    try:
        tensors = read_fragments(fh)
    except FragmentError as exc:
        raise CheckpointError(str(exc), exc.offset, path) from exc
    if fh.tell() != len(raw):
        raise CheckpointError("trailing bytes after the last fragment", fh.tell(), path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError("no embedded run configuration", HEADER, path)
    config = parse_config(decode_text(tensors.pop(CONFIG_KEY)))
    if config.config_hash() != digest:
        raise CheckpointError("embedded configuration does not match the header hash", 8, path)
    return digest, config, tensors


def load_for_resume(path: str | Path, config: RunConfig) -> dict[str, np.ndarray]:
    """Tensors of a checkpoint written under an equivalent configuration."""
    digest, _, tensors = read_checkpoint(path)
    if digest != config.config_hash():
        raise CheckpointError("config hash mismatch: checkpoint was written by a different configuration", 8, path)
    return tensors
