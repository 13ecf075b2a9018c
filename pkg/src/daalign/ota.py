"""Sliced Wasserstein alignment of decoder features.

Both feature sets are projected onto K random unit directions; in one
dimension the optimal coupling between two equal-size point sets pairs them
in sorted order, so each projection contributes the squared distance between
the two sorted projection vectors.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ndnum as nd
from .ndnum import Tensor

DOMAINS = ("source", "target")


@dataclass
class DecoderFeatures:
    features: Tensor
    domain: str = "source"

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.features.data.ndim != 2:
            raise ValueError(f"decoder features must be N x d, got {self.features.shape}")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError("decoder features must be non-empty")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ProjectionSet:
    thetas: np.ndarray  # K x d, unit rows

    @property
    def k(self) -> int:
        return self.thetas.shape[0]

    @property
    def d(self) -> int:
        return self.thetas.shape[1]


def sample_projections(k: int, d: int, rng: np.random.Generator) -> ProjectionSet:
    """Draw ``k`` directions uniformly on the unit sphere in R^d."""
    if d < 1:
        raise ValueError("projection dimension must be >= 1")
    if k < 1:
        raise ValueError("need at least one projection")
    thetas = rng.standard_normal((k, d))
    norms = np.linalg.norm(thetas, axis=1)
    # a zero draw has probability zero; redraw rather than divide by it
    while np.any(norms == 0.0):
        bad = norms == 0.0
        thetas[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(thetas, axis=1)
    return ProjectionSet(thetas / norms[:, None])


def _features(x) -> Tensor:
    if isinstance(x, DecoderFeatures):
        return x.features
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_pair(src: Tensor, tgt: Tensor, proj: ProjectionSet) -> None:
    if src.data.ndim != 2 or tgt.data.ndim != 2:
        raise ValueError("feature sets must be N x d matrices")
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("empty feature set")
    if src.shape[0] != tgt.shape[0]:
        raise ValueError(f"feature count mismatch: {src.shape[0]} vs {tgt.shape[0]}")
    if src.shape[1] != tgt.shape[1] or src.shape[1] != proj.d:
        raise ValueError(f"dimension mismatch: {src.shape[1]}, {tgt.shape[1]}, projections {proj.d}")


def sliced_w2(src, tgt, proj: ProjectionSet) -> Tensor:
    """Sum over projections and sorted positions of squared gaps; differentiable in both sets."""
    s, t = _features(src), _features(tgt)
    _check_pair(s, t, proj)
    theta = Tensor(proj.thetas)
    ps, _ = nd.sort_with_permutation(theta @ s.T)  # K x N
    pt, _ = nd.sort_with_permutation(theta @ t.T)
    return nd.sum(nd.square(ps - pt))


def per_projection_terms(src, tgt, proj: ProjectionSet) -> np.ndarray:
    s, t = _features(src).data, _features(tgt).data
    _check_pair(Tensor(s), Tensor(t), proj)
    ps = np.sort(proj.thetas @ s.T, axis=1)
    pt = np.sort(proj.thetas @ t.T, axis=1)
    return ((ps - pt) ** 2).sum(axis=1)


def exact_1d_w2(a, b, method: str = "assignment") -> float:
    """Minimum over bijections of the summed squared differences, without sorting.

    ``method="assignment"`` solves the n x n assignment problem;
    ``method="brute"`` enumerates all permutations (n <= 8).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    cost = (a[:, None] - b[None, :]) ** 2
    if method == "assignment":
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum())
    if method == "brute":
        if a.size > 8:
            raise ValueError("brute-force search is limited to n <= 8")
        idx = np.arange(a.size)
        perms = np.array(list(itertools.permutations(range(a.size))))
        return float(cost[idx, perms].sum(axis=1).min())
    raise ValueError(f"unknown method {method!r}")
