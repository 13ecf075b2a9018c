"""Object-aware adversarial alignment of multi-scale backbone features.

Feature maps are stored channel-last, one tensor per pyramid level shaped
``(B, H, W, C)``; score maps and weight masks are ``(B, H, W)``. Cell
``(row, col)`` of a level with stride ``s`` is centred at image coordinate
``((col + 0.5) * s, (row + 0.5) * s)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndnum as nd
from .ndnum import Tensor


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    strides: list[int]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per level")
        prev = None
        for lv in self.levels:
            if lv.data.ndim != 4:
                raise ValueError(f"level must be (B, H, W, C), got {lv.shape}")
            hw = lv.shape[1:3]
            if prev is not None and (hw[0] > prev[0] or hw[1] > prev[1]):
                raise ValueError("spatial extents must not grow with level")
            prev = hw

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    def geometry(self) -> list[tuple[int, int, int]]:
        """``(H, W, stride)`` per level."""
        return [(lv.shape[1], lv.shape[2], s) for lv, s in zip(self.levels, self.strides)]


@dataclass
class DomainScoreMap:
    """Per-level discriminator outputs for a batch of one domain.

    ``scores`` holds p (probability of source) and ``complements`` holds 1 - p,
    computed as sigmoid(-logit) so neither side loses precision near 0 or 1.
    """

    scores: list[Tensor]
    complements: list[Tensor]
    domain: str


def scores_from_logits(logits: Sequence[Tensor], domain: str) -> DomainScoreMap:
    """Wrap per-level ``(B, H, W)`` logits as a score map."""
    return DomainScoreMap([nd.sigmoid(z) for z in logits], [nd.sigmoid(-z) for z in logits], domain)


class DiscriminatorHead:
    """Two linear layers with a ReLU between, applied independently to each row."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, zero_final: bool = False):
        self.in_dim = in_dim
        self.hidden = hidden
        self.w1 = nd.parameter(rng.standard_normal((in_dim, hidden)) * np.sqrt(2.0 / in_dim))
        self.b1 = nd.parameter(np.zeros((1, hidden)))
        w2 = np.zeros((hidden, 1)) if zero_final else rng.standard_normal((hidden, 1)) * np.sqrt(1.0 / hidden)
        self.w2 = nd.parameter(w2)
        self.b2 = nd.parameter(np.zeros((1, 1)))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, rows: Tensor) -> Tensor:
        n, c = rows.shape
        if c != self.in_dim:
            raise ValueError(f"channel-width mismatch: head expects {self.in_dim}, got {c}")
        ones = Tensor(np.ones((n, 1)))
        h = nd.relu(rows @ self.w1 + ones @ self.b1)
        return nd.reshape(h @ self.w2 + ones @ self.b2, (n,))


class Discriminator:
    """One per-pixel head per pyramid level; the input passes through gradient reversal."""

    def __init__(self, channels: Sequence[int], hidden: int = 32, seed: int = 0,
                 grl_factor: float = 1.0, zero_final: bool = False):
        rng = np.random.default_rng(seed)
        self.channels = list(channels)
        self.heads = [DiscriminatorHead(c, hidden, rng, zero_final) for c in self.channels]
        self.grl_factor = grl_factor

    def parameters(self) -> list[Tensor]:
        return [p for h in self.heads for p in h.parameters()]

    def state_dict(self, prefix: str = "disc") -> dict[str, np.ndarray]:
        out = {}
        for i, h in enumerate(self.heads):
            for name in ("w1", "b1", "w2", "b2"):
                out[f"{prefix}.{i}.{name}"] = getattr(h, name).data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "disc") -> None:
        for i, h in enumerate(self.heads):
            for name in ("w1", "b1", "w2", "b2"):
                key = f"{prefix}.{i}.{name}"
                arr = state[key]
                p = getattr(h, name)
                if arr.shape != p.shape:
                    raise ValueError(f"{key}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=np.float64)


def discriminate(pyr: FeaturePyramid, disc: Discriminator, domain: str = "source") -> DomainScoreMap:
    if len(pyr.levels) != len(disc.heads):
        raise ValueError(f"pyramid has {len(pyr.levels)} levels, discriminator {len(disc.heads)}")
    scores, comps = [], []
    for lv, head in zip(pyr.levels, disc.heads):
        b, h, w, c = lv.shape
        if c != head.in_dim:
            raise ValueError(f"channel-width mismatch: level has {c}, head expects {head.in_dim}")
        x = nd.grad_reverse(lv, disc.grl_factor)
        z = head.logits(nd.reshape(x, (b * h * w, c)))
        scores.append(nd.reshape(nd.sigmoid(z), (b, h, w)))
        comps.append(nd.reshape(nd.sigmoid(-z), (b, h, w)))
    return DomainScoreMap(scores, comps, domain)


def _check_pair(src: DomainScoreMap, tgt: DomainScoreMap) -> None:
    if not src.scores or not tgt.scores:
        raise ValueError("empty score maps")
    if len(src.scores) != len(tgt.scores):
        raise ValueError("source and target have different level counts")
    for ps, pt in zip(src.scores, tgt.scores):
        if ps.shape[0] == 0 or pt.shape[0] == 0:
            raise ValueError("empty batch")
        if ps.shape[1:] != pt.shape[1:]:
            raise ValueError(f"level shape mismatch {ps.shape[1:]} vs {pt.shape[1:]}")


def global_align_loss(scores_src: DomainScoreMap, scores_tgt: DomainScoreMap) -> Tensor:
    """Binary domain cross-entropy, averaged over pixels within a level, summed over levels."""
    _check_pair(scores_src, scores_tgt)
    total = None
    for ps, qt in zip(scores_src.scores, scores_tgt.complements):
        term = -(nd.mean(nd.log(ps)) + nd.mean(nd.log(qt)))
        total = term if total is None else total + term
    return total


def _masked_term(values: Tensor, mask: np.ndarray, normalize: bool) -> Tensor | None:
    if mask.shape != values.shape:
        raise ValueError(f"mask shape {mask.shape} does not match score map {values.shape}")
    idx = np.flatnonzero(np.asarray(mask).reshape(-1) != 0)
    if idx.size == 0:
        return None
    picked = nd.gather(nd.reshape(values, (values.size,)), idx)
    s = -nd.sum(nd.log(picked))
    return s / float(idx.size) if normalize else s


def masked_align_loss(scores_src: DomainScoreMap, scores_tgt: DomainScoreMap,
                      masks_src: Sequence[np.ndarray], masks_tgt: Sequence[np.ndarray],
                      normalize: bool = True) -> Tensor:
    """Domain cross-entropy restricted to pixels whose weight mask is 1.

    Each domain's term on a level is divided by its own count of selected
    pixels, so all-one masks reproduce :func:`global_align_loss`. Pixels
    outside the masks never enter the graph.
    """
    _check_pair(scores_src, scores_tgt)
    if len(masks_src) != len(scores_src.scores) or len(masks_tgt) != len(scores_tgt.scores):
        raise ValueError("one mask per level is required")
    total = None
    for ps, qt, ms, mt in zip(scores_src.scores, scores_tgt.complements, masks_src, masks_tgt):
        for term in (_masked_term(ps, ms, normalize), _masked_term(qt, mt, normalize)):
            if term is not None:
                total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def oaa_loss(global_loss: Tensor, masked_loss: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return global_loss + masked_loss * float(lam)


def domain_bce(src_rows: Tensor, tgt_rows: Tensor, head: DiscriminatorHead, grl_factor: float = 1.0) -> Tensor:
    """Adversarial alignment of two row sets through a single head (decoder-feature baseline)."""
    zs = head.logits(nd.grad_reverse(src_rows, grl_factor))
    zt = head.logits(nd.grad_reverse(tgt_rows, grl_factor))
    return -(nd.mean(nd.log(nd.sigmoid(zs))) + nd.mean(nd.log(nd.sigmoid(-zt))))
