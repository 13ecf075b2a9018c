"""Procedural two-domain detection scenes.

Source scenes are flat shapes on a dim background with a faint grey wave.
Every source colour lies in the plane blue = (red + green) / 2. The target
domain renders exactly the same scene from the same seed, so every target
image has a source twin, and then moves it off that plane: a whole-image
colour cast, streaks and sensor noise all along the cast axis, plus a small
grey offset. A patch embedding can learn to ignore the cast axis, which is
what feature alignment is supposed to discover without target labels.
"""
from __future__ import annotations

import concurrent.futures as cf
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

CLASS_NAMES = ("block", "disk", "frame")
# every source colour satisfies blue = (red + green) / 2, so source pixels
# carry no signal along the colour-cast axis used by the target domain
CLASS_COLORS = np.array([
    [0.88, 0.32, 0.60],
    [0.32, 0.88, 0.60],
    [0.75, 0.75, 0.75],
])
_GREY = np.array([1.0, 1.0, 1.0])
_RED_GREEN = np.array([1.0, -1.0, 0.0])


@dataclass(frozen=True)
class DomainShiftConfig:
    haze: float = 0.0          # strength of the whole-image colour cast
    brightness: float = 0.0    # additive shift after haze
    texture_freq: float = 0.0  # cycles per image width of colour-cast streaks
    noise_sigma: float = 0.0
    seed: int = 0

    def is_zero(self) -> bool:
        return self.haze == 0 and self.brightness == 0 and self.texture_freq == 0 and self.noise_sigma == 0

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_SHIFT = DomainShiftConfig(haze=0.4, brightness=0.03, texture_freq=7.0, noise_sigma=0.03)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    max_objects: int = 3
    min_extent: int = 10
    max_extent: int = 22
    class_probs: tuple[float, ...] = (0.4, 0.35, 0.25)
    base_texture_freq: float = 2.0
    haze_color: tuple[float, float, float] = (0.5, 0.5, -1.0)
    texture_amp: float = 0.06


@dataclass
class Scene:
    image: np.ndarray                   # H x W x 3 in [0, 1], multiples of 1/255
    boxes: np.ndarray                   # n x 4, x_min y_min x_max y_max in pixels
    labels: np.ndarray                  # n
    domain: str = "source"
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _overlaps(box, others, margin=2) -> bool:
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in others:
        if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
            return True
    return False


def _paint(img: np.ndarray, label: int, box, color: np.ndarray) -> None:
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = y1 - y0, x1 - x0
    if label == 0:
        img[y0:y1, x0:x1] = color
    elif label == 1:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        inside = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
        img[y0:y1, x0:x1][inside] = color
    else:
        t = 3
        img[y0:y0 + t, x0:x1] = color
        img[y1 - t:y1, x0:x1] = color
        img[y0:y1, x0:x0 + t] = color
        img[y0:y1, x1 - t:x1] = color


def generate_scene(seed: int, shift: DomainShiftConfig | None = None, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Render one scene; ``shift=None`` (or an all-zero shift) gives the source rendering."""
    rng = np.random.default_rng(seed)
    n = cfg.size
    probs = np.asarray(cfg.class_probs, dtype=np.float64)
    probs = probs / probs.sum()

    base = rng.uniform(0.25, 0.40)
    tint = rng.uniform(-0.03, 0.03) * _RED_GREEN
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    count = int(rng.integers(1, cfg.max_objects + 1))
    boxes, labels, colors = [], [], []
    for _ in range(count):
        label = int(rng.choice(len(probs), p=probs))
        for _attempt in range(20):
            bw = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
            bh = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
            x0 = int(rng.integers(0, n - bw + 1))
            y0 = int(rng.integers(0, n - bh + 1))
            box = (x0, y0, x0 + bw, y0 + bh)
            if not _overlaps(box, boxes):
                break
        else:
            continue
        jitter = rng.uniform(-0.06, 0.06) * _GREY + rng.uniform(-0.06, 0.06) * _RED_GREEN
        boxes.append(box)
        labels.append(label)
        colors.append(np.clip(CLASS_COLORS[label] + jitter, 0.0, 1.0))
    if not boxes:
        # the first placement on an empty canvas cannot overlap, so this is unreachable
        raise RuntimeError("scene generation placed no objects")

    domain = "source" if shift is None else "target"
    shift = shift or DomainShiftConfig()
    yy, xx = np.mgrid[0:n, 0:n] / n
    along = xx * np.cos(angle) + yy * np.sin(angle)
    wave = np.sin(2 * np.pi * cfg.base_texture_freq * along + phase)
    img = np.empty((n, n, 3))
    img[:] = base + tint
    img += 0.06 * wave[..., None]
    for label, box, color in zip(labels, boxes, colors):
        _paint(img, label, box, color)

    if not shift.is_zero():
        cast = np.asarray(cfg.haze_color)
        img = img + shift.haze * cast + shift.brightness
        if shift.texture_freq > 0:
            streaks = np.sin(2 * np.pi * shift.texture_freq * along + 2.0 * phase)
            img = img + cfg.texture_amp * streaks[..., None] * cast
        if shift.noise_sigma > 0:
            img = img + rng.normal(0.0, shift.noise_sigma, size=(n, n, 1)) * cast
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Scene(
        image=img,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        domain=domain,
        seed=seed,
    )


def scene_seeds(base_seed: int, stream: str, count: int) -> list[int]:
    """Deterministic per-scene seeds for a named stream (e.g. ``"src-train"``)."""
    tag = int.from_bytes(stream.encode("utf-8"), "little") % (2 ** 32)
    ss = np.random.SeedSequence([base_seed, tag])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)]


def iter_scenes(seeds: Sequence[int], shift: DomainShiftConfig | None = None,
                cfg: SceneConfig = SceneConfig(), workers: int = 1, prefetch: int = 16) -> Iterator[Scene]:
    """Yield scenes in seed order, rendering up to ``prefetch`` ahead on a worker pool."""
    if workers <= 1:
        for s in seeds:
            yield generate_scene(s, shift, cfg)
        return
    with cf.ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        it = iter(seeds)
        for s in it:
            pending.append(pool.submit(generate_scene, s, shift, cfg))
            if len(pending) >= prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def make_dataset(base_seed: int, stream: str, count: int, shift: DomainShiftConfig | None = None,
                 cfg: SceneConfig = SceneConfig(), workers: int = 1) -> list[Scene]:
    return list(iter_scenes(scene_seeds(base_seed, stream, count), shift, cfg, workers))
