"""Gradient utilities: finite-difference checking and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` in the L2 norm; 0 when both vanish.

    The floor keeps gradients that are zero in exact arithmetic (a bias that
    feeds a batch-statistics normalisation) from comparing rounding noise
    against rounding noise.
    """
    if not np.any(analytic) and not np.any(numeric):
        return 0.0
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float) -> np.ndarray:
    """Central differences of ``fn()`` with respect to every element of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-4, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``fn()`` with central differences.

    ``params`` must be float64 leaves; their data is perturbed in place and
    restored afterwards.
    """
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check needs float64 parameters")
    loss = fn()
    grads = backward(loss, accumulate=False)
    report = GradCheckReport(tol=tol)
    for name, p in zip(names, params):
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = numeric_grad(fn, p, h)
        report.params.append(ParamCheck(name, relative_error(analytic, numeric),
                                        float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric))))
    return report


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale every gradient by ``max_norm / norm`` when the joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
