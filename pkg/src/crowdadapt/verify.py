"""Finite-difference verification suite behind ``crowdadapt gradcheck``.

Every differentiable op is checked on small random float64 inputs, then the
full episode loss is checked end to end (guide -> phi slices -> guided BN ->
counting net) on a tiny architecture, together with the BN baseline loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .gradients import finite_diff_check
from .models import ArchConfig, build_model
from .scenes import gen_scene, sample_scene_params
from .tensor import (
    Tensor,
    batch_norm_affine,
    concat1d,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    mean_rows,
    relu,
    reshape,
    slice1d,
    sse,
    tsum,
)
from .training import baseline_loss, episode_loss

TINY_ARCH = ArchConfig(encoder_channels=(2, 3, 3), decoder_gbn_channels=(3, 2),
                       guiding_channels=(2, 2, 3), n_gbn_layers=2)
TINY_SHAPE = (16, 16)


@dataclass
class OpResult:
    op: str
    max_rel_error: float
    worst_param: str


@dataclass
class SuiteReport:
    tol: float
    results: list[OpResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.results)

    @property
    def passed(self) -> bool:
        return all(r.max_rel_error < self.tol for r in self.results)

    def lines(self) -> list[str]:
        out = ["op\tmax_rel_error\tworst_param\tstatus"]
        for r in self.results:
            status = "ok" if r.max_rel_error < self.tol else "FAIL"
            out.append(f"{r.op}\t{r.max_rel_error:.3e}\t{r.worst_param}\t{status}")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"# {verdict}: max rel. error {self.max_rel_error:.3e} (tol {self.tol:g})")
        return out

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "ops": [{"op": r.op, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param}
                    for r in self.results],
        }


def _leaf(gen: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(gen.standard_normal(shape) * scale, requires_grad=True)


def _op_cases(gen: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """(name, loss closure, named leaves) for each op; losses project outputs on fixed random tensors."""
    cases = []

    def projector() -> Callable[[Tensor], Tensor]:
        cache: dict = {}

        def proj(out: Tensor) -> Tensor:
            if "r" not in cache:
                cache["r"] = Tensor(gen.standard_normal(out.shape))
            return tsum(out * cache["r"])
        return proj

    a, b = _leaf(gen, 3, 4), _leaf(gen, 3, 4)
    ra = gen.standard_normal((3, 4))
    cases.append(("add", lambda: sse(a + b, ra), {"a": a, "b": b}))
    cases.append(("mul", lambda: sse(a * b, ra), {"a": a, "b": b}))
    cases.append(("mul_scalar", lambda: sse(a * 1.7 - 0.3, ra), {"a": a}))
    cases.append(("sum", lambda: tsum(a) * tsum(b), {"a": a, "b": b}))
    cases.append(("reshape", lambda: sse(reshape(a, (2, 6)), ra.reshape(2, 6)), {"a": a}))

    v, w = _leaf(gen, 7), _leaf(gen, 5)
    rv = gen.standard_normal(12)
    cases.append(("slice1d+concat1d",
                  lambda: sse(concat1d([slice1d(v, 2, 6), w, slice1d(v, 0, 3)]), rv), {"v": v, "w": w}))
    rows = _leaf(gen, 4, 6)
    rr = gen.standard_normal(6)
    cases.append(("mean_rows", lambda: sse(mean_rows(rows), rr), {"rows": rows}))
    cases.append(("sse", lambda: sse(a, ra), {"a": a}))

    x = _leaf(gen, 2, 3, 4, 5)
    rx = gen.standard_normal((2, 3, 4, 5))
    cases.append(("relu", lambda: sse(relu(x), rx), {"x": x}))

    cx = _leaf(gen, 2, 2, 7, 6)
    cw, cb = _leaf(gen, 3, 2, 3, 3, scale=0.5), _leaf(gen, 3)
    for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 1)]:
        cases.append((f"conv2d(s{stride},p{pad},d{dil})",
                      lambda s=stride, p=pad, d=dil, proj=projector(): proj(conv2d(cx, cw, cb, stride=s, padding=p, dilation=d)),
                      {"x": cx, "weight": cw, "bias": cb}))
    gw = _leaf(gen, 3, 2, 4, 4, scale=0.5)
    cases.append(("conv2d(k4,s2,p1)", lambda proj=projector(): proj(conv2d(cx, gw, cb, stride=2, padding=1)),
                  {"x": cx, "weight": gw, "bias": cb}))

    # distinct values keep max-pool away from ties
    px = Tensor(gen.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1, requires_grad=True)
    cases.append(("maxpool2d", lambda proj=projector(): proj(maxpool2d(px, 2, 2)), {"x": px}))
    cases.append(("global_avg_pool", lambda proj=projector(): proj(global_avg_pool(x)), {"x": x}))

    lx, lw, lb = _leaf(gen, 3, 4), _leaf(gen, 5, 4), _leaf(gen, 5)
    cases.append(("linear", lambda proj=projector(): proj(linear(lx, lw, lb)), {"x": lx, "weight": lw, "bias": lb}))

    nx = _leaf(gen, 2, 3, 3, 4)
    ng, nb = _leaf(gen, 3), _leaf(gen, 3)
    cases.append(("batch_norm_affine(batch)", lambda proj=projector(): proj(batch_norm_affine(nx, ng, nb, 1e-5)),
                  {"x": nx, "gamma": ng, "beta": nb}))
    mean, var = gen.standard_normal(3), gen.uniform(0.5, 2.0, 3)
    cases.append(("batch_norm_affine(fixed stats)",
                  lambda proj=projector(): proj(batch_norm_affine(nx, ng, nb, 1e-5, mean=mean, var=var)),
                  {"x": nx, "gamma": ng, "beta": nb}))
    return cases


def _check(name: str, fn: Callable[[], Tensor], leaves: dict[str, Tensor], tol: float, h: float) -> OpResult:
    rep = finite_diff_check(fn, list(leaves.values()), h=h, tol=tol, names=list(leaves))
    worst = max(rep.params, key=lambda p: p.rel_error)
    return OpResult(name, rep.max_rel_error, worst.name)


def _jitter(params: dict[str, Tensor], gen: np.random.Generator) -> None:
    """Move a fresh model off its init.

    Zero biases put dead-channel activations exactly on the ReLU kink, where
    central differences see slope 1/2, so the check would test a
    non-differentiable point.
    """
    for name, t in params.items():
        if name.endswith("bias"):
            t.data = t.data + gen.standard_normal(t.shape) * 0.1
    # lift the guide's output layer off its near-zero init so theta gets real gradients
    if "guide.fc.weight" in params:
        fc = params["guide.fc.weight"]
        fc.data = gen.standard_normal(fc.shape) * 0.3


def _end_to_end_cases(seed: int) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    scene = gen_scene(sample_scene_params("gradcheck", seed), 4, TINY_SHAPE, seed)
    gen = rngmod.stream(seed, "gradcheck/jitter")
    gbn = build_model(TINY_ARCH, seed, dtype=np.float64)
    _jitter(gbn.parameters(), gen)
    bn = build_model(TINY_ARCH, seed, kind="bn", dtype=np.float64)
    _jitter(bn.parameters(), gen)
    bn_params = bn.parameters()
    bn_buffers = {k: v.copy() for k, v in bn.buffers.items()}

    def bn_loss() -> Tensor:
        # running-stat updates are a side effect; restore them so every evaluation sees the same state
        bn.buffers.update({k: v.copy() for k, v in bn_buffers.items()})
        return baseline_loss(scene, [1, 2], bn)

    return [
        ("episode_loss(guide->gbn->count)", lambda: episode_loss(scene, 0, [1, 2, 3], gbn), gbn.parameters()),
        ("baseline_loss(bn)", bn_loss, bn_params),
    ]


def run_gradcheck(seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> SuiteReport:
    gen = rngmod.stream(seed, "gradcheck/ops")
    report = SuiteReport(tol)
    for name, fn, leaves in _op_cases(gen) + _end_to_end_cases(seed):
        report.results.append(_check(name, fn, leaves, tol, h))
    return report
