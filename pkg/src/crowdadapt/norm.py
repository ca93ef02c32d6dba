"""Batch normalisation and guided batch normalisation.

Guided BN uses the same per-channel statistics as plain BN but takes its
scale/shift from outside (the guiding network) instead of owning them. The
flat vector holding every guided layer's scale and shift is wrapped by
:class:`GbnParams`, which knows how to cut it into per-layer pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, batch_norm_affine, concat1d, slice1d

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class GbnLayerConfig:
    channels: int
    epsilon: float = DEFAULT_EPS
    stats_mode: str = "batch"  # "batch" | "running"
    momentum: float = 0.1

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.stats_mode not in ("batch", "running"):
            raise ValueError(f"unknown stats_mode {self.stats_mode!r}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, x: np.ndarray, momentum: float) -> None:
        mean = x.mean(axis=(0, 2, 3))
        var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        self.mean = ((1.0 - momentum) * self.mean + momentum * mean).astype(self.mean.dtype)
        self.var = ((1.0 - momentum) * self.var + momentum * var).astype(self.var.dtype)


def gbn_forward(x: Tensor, gamma: Tensor, beta: Tensor, cfg: GbnLayerConfig,
                stats: RunningStats | None = None, training: bool = False) -> Tensor:
    """Guided BN: normalise each channel of ``x`` then apply the predicted affine.

    In ``batch`` mode the statistics always come from ``x`` itself. In
    ``running`` mode ``stats`` is required: training steps normalise with the
    batch statistics and fold them into the moving averages, evaluation uses
    the stored averages.
    """
    if x.shape[1] != cfg.channels:
        raise ValueError(f"channel axis mismatch: input has D={x.shape[1]}, layer expects {cfg.channels}")
    if cfg.stats_mode == "batch":
        return batch_norm_affine(x, gamma, beta, cfg.epsilon)
    if stats is None:
        raise ValueError("running stats_mode needs a RunningStats instance")
    if training:
        out = batch_norm_affine(x, gamma, beta, cfg.epsilon)
        stats.update(x.data, cfg.momentum)
        return out
    return batch_norm_affine(x, gamma, beta, cfg.epsilon, mean=stats.mean, var=stats.var)


@dataclass
class BnLayerState:
    """Conventional BN layer: learned affine plus moving statistics."""

    channels: int
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1,
               epsilon: float = DEFAULT_EPS) -> "BnLayerState":
        return cls(
            channels,
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
            momentum,
            epsilon,
        )


def bn_forward(x: Tensor, state: BnLayerState, training: bool) -> Tensor:
    if x.shape[1] != state.channels:
        raise ValueError(f"channel axis mismatch: input has D={x.shape[1]}, layer expects {state.channels}")
    if training:
        out = batch_norm_affine(x, state.gamma, state.beta, state.epsilon)
        stats = RunningStats(state.running_mean, state.running_var)
        stats.update(x.data, state.momentum)
        state.running_mean, state.running_var = stats.mean, stats.var
        return out
    return batch_norm_affine(x, state.gamma, state.beta, state.epsilon,
                             mean=state.running_mean, var=state.running_var)


@dataclass
class GbnParams:
    """Flat predicted vector plus its per-layer layout.

    ``layout`` lists ``(layer_index, channels)`` pairs; layer ``p`` owns
    ``gamma`` followed by ``beta``, both of length ``channels``, in one
    contiguous block.
    """

    phi: Tensor
    layout: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        expected = layout_width(self.layout)
        if self.phi.data.ndim != 1 or self.phi.shape[0] != expected:
            raise ValueError(f"phi has shape {self.phi.shape}, layout needs ({expected},)")

    def offsets(self) -> dict[int, tuple[int, int]]:
        out, pos = {}, 0
        for p, d in self.layout:
            out[p] = (pos, d)
            pos += 2 * d
        return out


def layout_width(layout: Sequence[tuple[int, int]]) -> int:
    return sum(2 * d for _, d in layout)


def make_layout(channels: Sequence[int]) -> list[tuple[int, int]]:
    return [(p, int(d)) for p, d in enumerate(channels)]


def slice_phi(params: GbnParams, p: int) -> tuple[Tensor, Tensor]:
    offsets = params.offsets()
    if p not in offsets:
        raise IndexError(f"layer {p} not in layout {params.layout}")
    start, d = offsets[p]
    return slice1d(params.phi, start, start + d), slice1d(params.phi, start + d, start + 2 * d)


def concat_phi(params: GbnParams) -> Tensor:
    pieces = []
    for p, _ in params.layout:
        pieces.extend(slice_phi(params, p))
    return concat1d(pieces)
