"""Confidence-filtered, class-agnostic box sets and their per-level weight masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    box: Box  # x_min, y_min, x_max, y_max in image pixels
    score: float
    label: int = 0


@dataclass
class PseudoBoxSet:
    boxes: list[Box] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    origin: str = "pseudo"  # or "ground-truth"
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.boxes)


def _valid(box: Sequence[float]) -> bool:
    x0, y0, x1, y1 = box
    return bool(np.all(np.isfinite(box))) and x0 < x1 and y0 < y1


def clamp_box(box: Sequence[float], width: float, height: float) -> Box:
    x0, y0, x1, y1 = (float(v) for v in box)
    return (min(max(x0, 0.0), width), min(max(y0, 0.0), height),
            min(max(x1, 0.0), width), min(max(y1, 0.0), height))


def filter_detections(dets: Iterable[Detection], tau: float = 0.5) -> PseudoBoxSet:
    """Keep boxes scoring strictly above ``tau``; labels are dropped.

    Malformed boxes are skipped and counted in ``rejected``.
    """
    out = PseudoBoxSet(origin="pseudo")
    for det in dets:
        if not _valid(det.box):
            out.rejected += 1
            continue
        if det.score > tau:
            out.boxes.append(tuple(float(v) for v in det.box))
            out.scores.append(float(det.score))
    if out.rejected:
        log.warning("filter_detections: rejected %d malformed boxes", out.rejected)
    return out


def ground_truth_boxes(boxes: Iterable[Sequence[float]]) -> PseudoBoxSet:
    kept = [tuple(float(v) for v in b) for b in boxes]
    return PseudoBoxSet(boxes=kept, scores=[1.0] * len(kept), origin="ground-truth")


def rasterize_masks(boxes: PseudoBoxSet | Sequence[Box], geometry: Sequence[tuple[int, int, int]]) -> list[np.ndarray]:
    """One ``(H, W)`` 0/1 mask per level; a cell is 1 iff its centre lies in some box.

    ``geometry`` lists ``(H, W, stride)`` per level. Box bounds are inclusive
    and overlapping boxes still give 1.
    """
    items = boxes.boxes if isinstance(boxes, PseudoBoxSet) else list(boxes)
    masks = []
    for h, w, stride in geometry:
        cx = (np.arange(w) + 0.5) * stride
        cy = (np.arange(h) + 0.5) * stride
        m = np.zeros((h, w), dtype=bool)
        for x0, y0, x1, y1 in items:
            inx = (cx >= x0) & (cx <= x1)
            iny = (cy >= y0) & (cy <= y1)
            m |= iny[:, None] & inx[None, :]
        masks.append(m.astype(np.float64))
    return masks


def source_masks_from_gt(annotations: Iterable[Sequence[float]], geometry) -> list[np.ndarray]:
    return rasterize_masks(ground_truth_boxes(annotations), geometry)


def batch_masks(box_sets: Sequence[PseudoBoxSet], geometry) -> list[np.ndarray]:
    """Stack per-image masks into one ``(B, H, W)`` array per level."""
    per_image = [rasterize_masks(bs, geometry) for bs in box_sets]
    return [np.stack([m[lv] for m in per_image]) for lv in range(len(geometry))]


def format_dump(records: Iterable[tuple[str, PseudoBoxSet]]) -> str:
    lines = []
    for image_id, bs in records:
        parts = [str(image_id)]
        for (x0, y0, x1, y1), s in zip(bs.boxes, bs.scores):
            parts.append(f"{x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f} {s:.6f}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_dump(text: str) -> list[tuple[str, PseudoBoxSet]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        head, *vals = line.split()
        if len(vals) % 5:
            raise ValueError(f"malformed pseudo-label record for {head!r}")
        bs = PseudoBoxSet()
        for i in range(0, len(vals), 5):
            x0, y0, x1, y1, s = (float(v) for v in vals[i:i + 5])
            bs.boxes.append((x0, y0, x1, y1))
            bs.scores.append(s)
        out.append((head, bs))
    return out
