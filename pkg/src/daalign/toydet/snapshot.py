"""On-disk dataset snapshots: one binary record per scene plus a JSON manifest.

Record layout (little-endian)::

    b"DSCN" | u32 version | u64 seed | u8 domain (0 source, 1 target)
    u32 height | u32 width | u32 channels | u8 pixels, row-major HWC
    u32 object count | per object: 4 x f64 box (x_min y_min x_max y_max), u32 label

Pixels are stored as 8-bit values; generated images are already quantised to
multiples of 1/255, so a load reproduces them bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .scenes import DomainShiftConfig, Scene, SceneConfig, make_dataset, scene_seeds

MAGIC = b"DSCN"
VERSION = 1
MANIFEST = "manifest.json"


class SnapshotError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, offset: int | None = None):
        where = "" if path is None else f" in {path}"
        at = "" if offset is None else f" at byte {offset}"
        super().__init__(f"{message}{where}{at}")
        self.path = path
        self.offset = offset


def encode_scene(scene: Scene) -> bytes:
    img = np.asarray(scene.image)
    q = np.round(img * 255.0)
    if np.any(np.abs(q / 255.0 - img) > 0):
        raise ValueError("image is not quantised to 1/255 steps")
    h, w, c = img.shape
    parts = [MAGIC, struct.pack("<IQB", VERSION, scene.seed, 1 if scene.domain == "target" else 0),
             struct.pack("<III", h, w, c), q.astype(np.uint8).tobytes(),
             struct.pack("<I", len(scene.labels))]
    for box, label in zip(np.asarray(scene.boxes, dtype="<f8"), scene.labels):
        parts.append(box.tobytes())
        parts.append(struct.pack("<I", int(label)))
    return b"".join(parts)


def decode_scene(raw: bytes, path: str | Path | None = None) -> Scene:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise SnapshotError(f"truncated record (wanted {n} bytes)", path, pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise SnapshotError("bad magic", path, 0)
    version, seed, dom = struct.unpack("<IQB", take(13))
    if version != VERSION:
        raise SnapshotError(f"unsupported record version {version}", path, 4)
    h, w, c = struct.unpack("<III", take(12))
    img = np.frombuffer(take(h * w * c), dtype=np.uint8).reshape(h, w, c).astype(np.float64) / 255.0
    (n,) = struct.unpack("<I", take(4))
    boxes = np.zeros((n, 4))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        boxes[i] = np.frombuffer(take(32), dtype="<f8")
        (labels[i],) = struct.unpack("<I", take(4))
    if pos != len(raw):
        raise SnapshotError("trailing bytes after record", path, pos)
    return Scene(image=img, boxes=boxes, labels=labels, domain="target" if dom else "source", seed=int(seed))


def write_snapshot(directory: str | Path, scenes: list[Scene], info: dict) -> Path:
    """Write records and a manifest; ``info`` lands verbatim in the manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.bin"
        raw = encode_scene(scene)
        (out / name).write_bytes(raw)
        files.append({"file": name, "seed": scene.seed, "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = dict(info, format_version=VERSION, count=len(scenes), records=files)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def read_snapshot(directory: str | Path, verify: bool = True) -> tuple[list[Scene], dict]:
    src = Path(directory)
    try:
        manifest = json.loads((src / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise SnapshotError("missing manifest", src / MANIFEST) from exc
    scenes = []
    for rec in manifest["records"]:
        path = src / rec["file"]
        raw = path.read_bytes()
        if verify and hashlib.sha256(raw).hexdigest() != rec["sha256"]:
            raise SnapshotError("checksum mismatch", path)
        scenes.append(decode_scene(raw, path))
    return scenes, manifest


def generate_snapshot(directory: str | Path, base_seed: int, stream: str, count: int,
                      shift: DomainShiftConfig | None = None, cfg: SceneConfig = SceneConfig(),
                      workers: int = 1) -> Path:
    scenes = make_dataset(base_seed, stream, count, shift, cfg, workers)
    info = {"base_seed": base_seed, "stream": stream, "scene_config": asdict(cfg),
            "shift": None if shift is None else shift.to_dict(),
            "seeds": scene_seeds(base_seed, stream, count)}
    return write_snapshot(directory, scenes, info)
