"""Count metrics, the repeated-trial adaptation protocol and phi-variance analysis."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .models import ModelState, adapt, model_checksum, predict_count, predict_density
from .norm import slice_phi
from .scenes import SceneDataset

SCHEMA_VERSION = 1


def _check_counts(pred: Sequence[float], gt: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} ground-truth counts")
    if p.size == 0:
        raise ValueError("need at least one count")
    return p, g


def mae(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> float:
    p, g = _check_counts(pred_counts, gt_counts)
    return float(np.mean(np.abs(p - g)))


def rmse(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> float:
    p, g = _check_counts(pred_counts, gt_counts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


@dataclass(frozen=True)
class EvalProtocol:
    K: int = 1
    trials: int = 5
    z_pool: str = "scene_pool"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.z_pool != "scene_pool":
            raise ValueError(f"unknown z_pool {self.z_pool!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalProtocol":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvalReport:
    config: dict
    per_trial: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "per_trial": self.per_trial,
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @property
    def mae(self) -> float:
        return self.aggregate["mae_mean"]

    @property
    def rmse(self) -> float:
        return self.aggregate["rmse_mean"]


def aggregate(per_trial: list[dict]) -> dict:
    """Mean and population std over trials of the per-trial scene-averaged metrics."""
    maes = np.array([t["mae"] for t in per_trial])
    rmses = np.array([t["rmse"] for t in per_trial])
    return {
        "mae_mean": float(maes.mean()),
        "mae_std": float(maes.std()),
        "rmse_mean": float(rmses.mean()),
        "rmse_std": float(rmses.std()),
        "std_convention": "population",
    }


def _scene_entry(scene: SceneDataset, model: ModelState, metric_idx: list[int], phi=None) -> dict:
    preds = [predict_count(predict_density(model, scene.images[i][None], phi)) for i in metric_idx]
    gts = [float(scene.counts()[i]) for i in metric_idx]
    return {
        "scene_id": scene.scene_id,
        "metric_indices": metric_idx,
        "pred_counts": preds,
        "gt_counts": gts,
        "mae": mae(preds, gts),
        "rmse": rmse(preds, gts),
    }


def run_adaptation_eval(model: ModelState, test_scenes: Sequence[SceneDataset], protocol: EvalProtocol) -> EvalReport:
    """Repeat ``trials`` times: per scene draw K unlabeled images, adapt, score the rest."""
    if model.kind != "gbn":
        raise ValueError("model has no GBN layers")
    for s in test_scenes:
        if len(s) <= protocol.K:
            raise ValueError(f"scene {s.scene_id} has {len(s)} images; need more than K={protocol.K}")
    before = model_checksum(model)
    per_trial = []
    for t in range(protocol.trials):
        scenes_out = []
        for scene in test_scenes:
            gen = rngmod.stream(protocol.seed, f"eval/trial/{t}/{scene.scene_id}")
            z_idx = sorted(int(i) for i in gen.choice(len(scene), size=protocol.K, replace=False))
            metric_idx = [i for i in range(len(scene)) if i not in z_idx]
            assert not set(z_idx) & set(metric_idx)
            phi = adapt(model, [scene.images[i][None] for i in z_idx])
            entry = _scene_entry(scene, model, metric_idx, phi)
            scenes_out.append({"scene_id": scene.scene_id, "z_indices": z_idx, **{k: v for k, v in entry.items() if k != "scene_id"}})
        per_trial.append(_trial_summary(t, scenes_out))
    if model_checksum(model) != before:
        raise RuntimeError("evaluation mutated model parameters")
    config = {"model": "adaptive", **protocol.to_dict(), "scenes": [s.scene_id for s in test_scenes]}
    return EvalReport(config, per_trial, aggregate(per_trial))


def run_baseline_eval(model_bn: ModelState, test_scenes: Sequence[SceneDataset], protocol: EvalProtocol) -> EvalReport:
    """Same metrics for the BN baseline; no adaptation, so every image is scored and K is ignored."""
    if model_bn.kind != "bn":
        raise ValueError("baseline evaluation needs a BN model")
    scenes_out = [_scene_entry(s, model_bn, list(range(len(s)))) for s in test_scenes]
    per_trial = [_trial_summary(t, scenes_out) for t in range(protocol.trials)]
    config = {"model": "bn_baseline", "trials": protocol.trials, "seed": protocol.seed,
              "scenes": [s.scene_id for s in test_scenes]}
    return EvalReport(config, per_trial, aggregate(per_trial))


def _trial_summary(t: int, scenes_out: list[dict]) -> dict:
    return {
        "trial": t,
        "mae": float(np.mean([s["mae"] for s in scenes_out])),
        "rmse": float(np.mean([s["rmse"] for s in scenes_out])),
        "scenes": scenes_out,
    }


# ---------------------------------------------------------------------------
# phi variance (within-scene vs across-scene)
# ---------------------------------------------------------------------------


@dataclass
class PhiVariance:
    layer: int
    within: np.ndarray
    across: np.ndarray
    scenes: list[str]

    def to_tsv(self) -> str:
        rows = ["dimension\twithin_var\tacross_var"]
        rows += [f"{d}\t{w:.9e}\t{a:.9e}" for d, (w, a) in enumerate(zip(self.within, self.across))]
        return "\n".join(rows) + "\n"


def _layer_phi(model: ModelState, image: np.ndarray, layer: int) -> np.ndarray:
    phi = adapt(model, [image[None]])
    gamma, beta = slice_phi(phi, layer)
    return np.concatenate([gamma.data, beta.data]).astype(np.float64)


def phi_variance_analysis(model: ModelState, scenes: Sequence[SceneDataset], n_images: int = 10,
                          layer: int = -1, seed: int = 0) -> PhiVariance:
    """Per-dimension variance of one guided layer's (gamma, beta) slice.

    ``n_images`` scenes are drawn. Within-scene variance is taken over
    ``n_images`` images of each drawn scene and averaged across those scenes;
    across-scene variance is taken over one image from each drawn scene.
    ``layer=-1`` selects the last guided layer. Variances are population
    variances.
    """
    layout = model.arch.gbn_layout()
    if layer < 0:
        layer = layout[layer][0]
    if layer not in dict(layout):
        raise IndexError(f"layer {layer} not in layout {layout}")
    if len(scenes) < n_images:
        raise ValueError(f"need at least {n_images} scenes, got {len(scenes)}")
    if any(len(s) < n_images for s in scenes):
        raise ValueError(f"every scene needs at least {n_images} images")
    gen = rngmod.stream(seed, "phi-variance")
    chosen = sorted(int(i) for i in gen.choice(len(scenes), size=n_images, replace=False))
    within = []
    across_rows = []
    for si in chosen:
        scene = scenes[si]
        picks = sorted(int(i) for i in gen.choice(len(scene), size=n_images, replace=False))
        rows = np.stack([_layer_phi(model, scene.images[i], layer) for i in picks])
        within.append(rows.var(axis=0))
        across_rows.append(rows[0])
    return PhiVariance(layer, np.mean(within, axis=0), np.stack(across_rows).var(axis=0),
                       [scenes[i].scene_id for i in chosen])
