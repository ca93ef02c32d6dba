"""Episodic multi-scene training.

Each episode draws one scene, picks one image as the unlabeled guide input z,
predicts phi from it, and scores the counting network on ``m`` other labeled
images of the same scene with a summed squared density error. Gradients flow
into both the counting-network weights and the guiding network.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .gradients import clip_global_norm, global_norm
from .models import ModelState, bn_count_forward, count_forward, gbn_running_stats, guide
from .scenes import SceneDataset
from .tensor import Tensor, backward, sse

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    clip_norm: float = 1.0
    lr_step: int = 1
    lr_gamma: float = 0.995
    images_per_episode: int = 4
    scene_step_mode: str = "per_scene"  # "per_scene" | "accumulated"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.images_per_episode < 1:
            raise ValueError("images_per_episode must be >= 1")
        if self.scene_step_mode not in ("per_scene", "accumulated"):
            raise ValueError(f"unknown scene_step_mode {self.scene_step_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    max_applied_grad_norm: float = 0.0
    wall_clock: float = 0.0

    def lines(self) -> list[str]:
        return [f"{e['epoch']}, {e['mean_loss']:.9g}, {e['lr']:.9g}" for e in self.epochs]

    def to_dict(self) -> dict:
        # wall clock deliberately left out so identical runs serialise identically
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "max_applied_grad_norm": self.max_applied_grad_norm,
            "epochs": self.epochs,
        }


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; moments are kept in float64.

    Returns new parameter arrays (in their original dtypes) and a new state.
    """
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params[name] = (p.astype(np.float64) - update).astype(p.dtype)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _image(scene: SceneDataset, i: int) -> np.ndarray:
    return scene.images[i][None]


def episode_loss(scene: SceneDataset, z_index: int, labeled_indices: Sequence[int], model: ModelState,
                 training: bool = True) -> Tensor:
    """Summed squared density error on ``labeled_indices`` with phi = g(z)."""
    n = len(scene)
    idx = [int(i) for i in labeled_indices]
    if not 0 <= z_index < n or any(not 0 <= i < n for i in idx):
        raise IndexError(f"episode indices out of range for a scene of {n} images")
    if z_index in idx:
        raise ValueError("the unlabeled image z must not be among the labeled images")
    if not idx:
        raise ValueError("an episode needs at least one labeled image")
    phi = guide([_image(scene, z_index)], model.theta, model.arch)
    stats = gbn_running_stats(model)
    total = None
    for i in idx:
        pred = count_forward(_image(scene, i), phi, model.psi, model.arch, stats=stats, training=training)
        term = sse(pred, scene.density_maps[i][None])
        total = term if total is None else total + term
    return total


def baseline_loss(scene: SceneDataset, indices: Sequence[int], model: ModelState) -> Tensor:
    """Plain supervised loss for the BN baseline; one image per forward."""
    total = None
    for i in indices:
        pred = bn_count_forward(_image(scene, int(i)), model, training=True)
        term = sse(pred, scene.density_maps[int(i)][None])
        total = term if total is None else total + term
    return total


def named_grads(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = backward(loss, accumulate=False)
    return {n: np.asarray(grads[t], dtype=np.float64) if t in grads else np.zeros(t.shape)
            for n, t in params.items()}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

StepHook = Callable[[int, str, dict], None]


def sample_episode(gen: np.random.Generator, n_images: int, m: int) -> tuple[int, list[int]]:
    z = int(gen.integers(n_images))
    rest = np.array([i for i in range(n_images) if i != z])
    labeled = gen.choice(rest, size=m, replace=False)
    return z, [int(i) for i in labeled]


def train(scenes: Sequence[SceneDataset], cfg: TrainConfig, model: ModelState,
          on_step: StepHook | None = None, log_stream: Callable[[str], None] | None = None
          ) -> tuple[ModelState, TrainLog]:
    """Train a copy of ``model`` and return it with its log.

    Works for both model kinds: the adaptive model runs guided episodes, the
    BN baseline sees the same sampled labeled images without the guide step.
    ``on_step(epoch, scene_id, applied_grads)`` observes every optimizer step.
    """
    for s in scenes:
        if len(s) < 2:
            raise ValueError(f"scene {s.scene_id} has {len(s)} images; need >= 2")
        if cfg.images_per_episode > len(s) - 1:
            raise ValueError(f"scene {s.scene_id}: images_per_episode {cfg.images_per_episode} > N-1 = {len(s) - 1}")
    model = model.copy()
    params = model.parameters()
    opt = AdamState()
    log = TrainLog(seed=cfg.seed, config_hash=cfg.config_hash())
    start = time.perf_counter()

    def apply(grads: dict[str, np.ndarray], lr: float, epoch: int, scene_id: str) -> None:
        nonlocal opt
        grads = clip_global_norm(grads, cfg.clip_norm)
        log.max_applied_grad_norm = max(log.max_applied_grad_norm, global_norm(grads))
        if on_step is not None:
            on_step(epoch, scene_id, grads)
        new, opt = adam_step({n: t.data for n, t in params.items()}, grads, opt, lr)
        for n, t in params.items():
            t.data = new[n]

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        gen = rngmod.stream(cfg.seed, f"train/epoch/{epoch}")
        order = gen.permutation(len(scenes))
        losses = []
        acc: dict[str, np.ndarray] | None = None
        for si in order:
            scene = scenes[int(si)]
            z, labeled = sample_episode(gen, len(scene), cfg.images_per_episode)
            if model.kind == "gbn":
                loss = episode_loss(scene, z, labeled, model)
            else:
                loss = baseline_loss(scene, labeled, model)
            losses.append(float(loss.data))
            grads = named_grads(loss, params)
            if cfg.scene_step_mode == "per_scene":
                apply(grads, lr, epoch, scene.scene_id)
            else:
                acc = grads if acc is None else {n: acc[n] + grads[n] for n in acc}
        if cfg.scene_step_mode == "accumulated" and acc is not None:
            apply(acc, lr, epoch, "*")
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        log.epochs.append({"epoch": epoch, "mean_loss": mean_loss, "lr": lr})
        if log_stream is not None:
            log_stream(log.lines()[-1])
    log.wall_clock = time.perf_counter() - start
    model.version += 1
    return model, log
