"""Average precision with all-points interpolation, per class and IoU threshold."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import ndnum as nd
from .loss import box_iou
from .model import ToyDetector, cxcywh_to_xyxy

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class Prediction:
    boxes: np.ndarray   # n x 4 xyxy pixels
    scores: np.ndarray  # n
    labels: np.ndarray  # n


@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray


@dataclass
class MapReport:
    thresholds: tuple[float, ...]
    class_names: tuple[str, ...]
    ap: np.ndarray                      # (len(thresholds), num_classes), nan for classes without objects
    maps: dict[float, float] = field(default_factory=dict)

    def map_at(self, t: float) -> float:
        return self.maps[round(t, 4)]

    def ratio(self, t: float, base: float = 0.5) -> float:
        b = self.map_at(base)
        return self.map_at(t) / b if b > 0 else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric," + ",".join(self.class_names) + ",mAP\n")
        for i, t in enumerate(self.thresholds):
            cells = ["" if np.isnan(v) else f"{v:.6f}" for v in self.ap[i]]
            buf.write(f"AP@{t:.2f}," + ",".join(cells) + f",{self.map_at(t):.6f}\n")
        for t in self.thresholds:
            if t > 0.5:
                buf.write(f"ratio@{t:.2f}/0.50," + "," * len(self.class_names) + f"{self.ratio(t):.6f}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(8, max(len(n) for n in self.class_names) + 1)
        head = "IoU".ljust(6) + "".join(n.rjust(width) for n in self.class_names) + "mAP".rjust(width)
        lines = [head, "-" * len(head)]
        for i, t in enumerate(self.thresholds):
            cells = "".join(("-" if np.isnan(v) else f"{100 * v:.1f}").rjust(width) for v in self.ap[i])
            lines.append(f"{t:.2f}".ljust(6) + cells + f"{100 * self.map_at(t):.1f}".rjust(width))
        ratios = ", ".join(f"mAP{int(round(100 * t))}/50={self.ratio(t):.3f}" for t in self.thresholds if t > 0.5)
        lines.append(ratios)
        return "\n".join(lines) + "\n"


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the monotone precision envelope for a ranked list of hits."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def _class_ap(preds: Sequence[Prediction], gts: Sequence[GroundTruth], cls: int, thr: float) -> float:
    num_gt = int(sum(int((g.labels == cls).sum()) for g in gts))
    entries = []
    for img, p in enumerate(preds):
        for j in np.flatnonzero(p.labels == cls):
            entries.append((-float(p.scores[j]), img, int(j)))
    # confidence descending, then image id, then box index
    entries.sort()
    taken = [np.zeros(int((g.labels == cls).sum()), dtype=bool) for g in gts]
    gt_boxes = [g.boxes[g.labels == cls] for g in gts]
    tp = np.zeros(len(entries))
    for k, (_, img, j) in enumerate(entries):
        cand = gt_boxes[img]
        if len(cand) == 0:
            continue
        ious = box_iou(preds[img].boxes[j], cand)[0]
        best = int(np.argmax(ious))
        if ious[best] >= thr and not taken[img][best]:
            taken[img][best] = True
            tp[k] = 1.0
    return average_precision(tp, num_gt)


def mean_average_precision(preds: Sequence[Prediction], gts: Sequence[GroundTruth], num_classes: int,
                           thresholds: Sequence[float] = THRESHOLDS,
                           class_names: Sequence[str] | None = None) -> MapReport:
    if not gts:
        raise ValueError("evaluation needs at least one image")
    if len(preds) != len(gts):
        raise ValueError("one prediction set per image")
    names = tuple(class_names) if class_names else tuple(f"class{c}" for c in range(num_classes))
    ap = np.array([[_class_ap(preds, gts, c, t) for c in range(num_classes)] for t in thresholds])
    maps = {}
    for i, t in enumerate(thresholds):
        row = ap[i][~np.isnan(ap[i])]
        maps[round(float(t), 4)] = float(row.mean()) if row.size else 0.0
    return MapReport(tuple(float(t) for t in thresholds), names, ap, maps)


def predict(det: ToyDetector, images: np.ndarray, batch_size: int = 32) -> list[Prediction]:
    """One prediction per query: best foreground class and its probability."""
    out = []
    size = det.cfg.image_size
    with nd.no_grad():
        for i in range(0, len(images), batch_size):
            res = det.forward(np.asarray(images[i:i + batch_size]))
            logits = res.logits.data
            z = logits - logits.max(-1, keepdims=True)
            probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
            fg = probs[..., :-1]
            labels = fg.argmax(-1)
            scores = fg.max(-1)
            boxes = cxcywh_to_xyxy(res.boxes.data, size)
            for b in range(boxes.shape[0]):
                out.append(Prediction(boxes[b], scores[b], labels[b]))
    return out


def evaluate_map(det: ToyDetector | Callable, scenes, thresholds: Sequence[float] = THRESHOLDS,
                 class_names: Sequence[str] | None = None, num_classes: int | None = None) -> MapReport:
    """mAP table for a detector, or for any callable mapping an image stack to predictions."""
    if len(scenes) == 0:
        raise ValueError("dataset is empty")
    images = np.stack([s.image for s in scenes])
    preds = predict(det, images) if isinstance(det, ToyDetector) else list(det(images))
    gts = [GroundTruth(s.boxes, s.labels) for s in scenes]
    if num_classes is None:
        num_classes = det.cfg.num_classes if isinstance(det, ToyDetector) else int(max(s.labels.max() for s in scenes)) + 1
    return mean_average_precision(preds, gts, num_classes, thresholds, class_names)
