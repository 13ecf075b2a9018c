"""Set matching and the supervised detection loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .. import ndnum as nd
from ..ndnum import Tensor

W_CLS, W_L1, W_IOU = 1.0, 5.0, 2.0


@dataclass
class Assignment:
    queries: np.ndarray   # matched query index per ground-truth object
    targets: np.ndarray   # ground-truth index, same length
    num_queries: int
    cost: float

    def labels(self, gt_labels: np.ndarray, background: int) -> np.ndarray:
        out = np.full(self.num_queries, background, dtype=np.int64)
        out[self.queries] = np.asarray(gt_labels)[self.targets]
        return out


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, ``(n, 4) x (m, 4) -> (n, m)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _xyxy(cxcywh: np.ndarray) -> np.ndarray:
    cx, cy, w, h = cxcywh[..., 0], cxcywh[..., 1], cxcywh[..., 2], cxcywh[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def match_cost(pred_boxes: np.ndarray, pred_probs: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """``(M, n)`` cost: -p(class) + L1 + (1 - IoU), boxes in normalised cx, cy, w, h."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls = -np.asarray(pred_probs)[:, np.asarray(gt_labels, dtype=np.int64)]
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    iou = box_iou(_xyxy(pred_boxes), _xyxy(gt_boxes))
    return W_CLS * cls + W_L1 * l1 + W_IOU * (1.0 - iou)


def match_predictions(pred_boxes: np.ndarray, pred_probs: np.ndarray, gt_boxes: np.ndarray,
                      gt_labels: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of queries to ground-truth objects."""
    m, n = len(pred_boxes), len(gt_labels)
    if n > m:
        raise ValueError(f"{n} objects cannot be matched to {m} queries")
    if n == 0:
        return Assignment(np.zeros(0, np.int64), np.zeros(0, np.int64), m, 0.0)
    cost = match_cost(pred_boxes, pred_probs, gt_boxes, gt_labels)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]
    return Assignment(rows.astype(np.int64), cols.astype(np.int64), m, float(cost[rows, cols].sum()))


def _abs(x: Tensor) -> Tensor:
    return nd.relu(x) + nd.relu(-x)


def _col(x: Tensor, j: int) -> Tensor:
    return nd.reshape(nd.gather(x, [j], axis=1), (x.shape[0],))


def _min(a: Tensor, b: Tensor) -> Tensor:
    return a - nd.relu(a - b)


def _max(a: Tensor, b: Tensor) -> Tensor:
    return a + nd.relu(b - a)


def iou_loss_terms(pred: Tensor, target: np.ndarray) -> Tensor:
    """``1 - IoU`` for aligned rows of cx, cy, w, h boxes; gradient flows into ``pred`` only."""
    t = Tensor(_xyxy(np.asarray(target, dtype=np.float64)))
    cx, cy, w, h = (_col(pred, j) for j in range(4))
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = (_col(t, j) for j in range(4))
    iw = nd.relu(_min(px1, tx1) - _max(px0, tx0))
    ih = nd.relu(_min(py1, ty1) - _max(py0, ty0))
    inter = iw * ih
    union = w * h + (tx1 - tx0) * (ty1 - ty0) - inter
    return 1.0 - inter / union


@dataclass
class DetLossParts:
    total: Tensor
    cls: Tensor
    l1: Tensor
    iou: Tensor


def detection_loss(assignments: list[Assignment], boxes: Tensor, logits: Tensor,
                   gt_boxes: list[np.ndarray], gt_labels: list[np.ndarray],
                   bg_weight: float = 0.2) -> DetLossParts:
    """Class cross-entropy over every query plus L1 and IoU terms on matched pairs.

    ``boxes``/``logits`` are ``(B, M, 4)`` and ``(B, M, K+1)``; ground-truth
    boxes are normalised cx, cy, w, h. Unmatched queries target the
    background class with weight ``bg_weight``. Box terms are averaged over
    the number of objects in the batch.
    """
    b, m, kp1 = logits.shape
    bg = kp1 - 1
    labels = np.concatenate([a.labels(l, bg) for a, l in zip(assignments, gt_labels)])
    weights = np.where(labels == bg, bg_weight, 1.0)
    probs = nd.softmax(nd.reshape(logits, (b * m, kp1)))
    picked = nd.gather(nd.reshape(probs, (b * m * kp1,)), np.arange(b * m) * kp1 + labels)
    nll = -nd.log(picked)
    cls = nd.sum(nll * Tensor(weights)) * (1.0 / weights.sum())

    rows = np.concatenate([i * m + a.queries for i, a in enumerate(assignments)]).astype(np.int64)
    if rows.size == 0:
        zero = Tensor(0.0)
        return DetLossParts(cls, cls, zero, zero)
    tgt = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1, 4)[a.targets]
                          for a, g in zip(assignments, gt_boxes)])
    pred = nd.gather(nd.reshape(boxes, (b * m, 4)), rows)
    n = float(rows.size)
    l1 = nd.sum(_abs(pred - Tensor(tgt))) * (1.0 / n)
    iou = nd.sum(iou_loss_terms(pred, tgt)) * (1.0 / n)
    total = cls + l1 * W_L1 + iou * W_IOU
    return DetLossParts(total, cls, l1, iou)
