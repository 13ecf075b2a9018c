from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x)).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6, tol: float = 1e-4,
                      floor: float = 1e-6) -> GradCheckReport:
    """Compare the backward gradient of scalar ``f`` at ``x`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is zero from dividing
    roundoff by roundoff.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    analytic = backward(f(leaf), accumulate=False).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x)
    numeric = numeric_grad(f, x, eps)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = float((diff / denom).max()) if diff.size else 0.0
    return GradCheckReport(rel, float(diff.max()) if diff.size else 0.0, analytic, numeric, tol)
