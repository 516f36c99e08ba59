"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Componentwise ``|a - n| / max(|a|, |n|, floor * max|n|)``.

    The floor keeps components whose true derivative is negligible next to
    the largest one from turning float32 round-off into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-12))
    return np.abs(a - n) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    indices=None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The analytic gradient is taken at ``x``'s own dtype. Perturbed evaluations
    run with ``x`` promoted to float64, so the difference quotient carries no
    float32 cancellation. ``indices`` (flat) restricts the check to a subset
    of coordinates.
    """
    base = x.data if isinstance(x, Tensor) else np.asarray(x)
    with no_grad():
        f0 = f(Tensor(base)).data
    if f0.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got output shape {f0.shape}")
    if not np.isfinite(f0).all():
        raise ValueError("grad_check: f(x) is not finite")

    leaf = Tensor(base.copy(), requires_grad=True)
    f(leaf).backward()
    analytic_full = leaf.grad.reshape(-1)

    flat = base.astype(np.float64).reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.empty(len(idx), dtype=np.float64)
    with no_grad():
        for out_i, i in enumerate(idx):
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = float(f(Tensor(xp.reshape(base.shape))).data.reshape(-1)[0])
            fm = float(f(Tensor(xm.reshape(base.shape))).data.reshape(-1)[0])
            numeric[out_i] = (fp - fm) / (2 * eps)
    analytic = analytic_full[idx].astype(np.float64)
    rel = relative_error(analytic, numeric, floor)
    if rel.size == 0:
        return GradCheckReport(0.0, None, analytic, numeric)
    worst = int(np.argmax(rel))
    return GradCheckReport(
        float(rel[worst]),
        tuple(int(v) for v in np.unravel_index(idx[worst], base.shape)),
        analytic,
        numeric,
    )
