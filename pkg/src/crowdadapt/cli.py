"""``crowdadapt`` command-line entry point.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .checkpoint import CheckpointError, load_model, save_model, save_phi
from .config import RunConfig, load_config
from .evaluation import EvalProtocol, EvalReport, phi_variance_analysis, run_adaptation_eval, run_baseline_eval
from .models import adapt, build_model
from .norm import slice_phi
from .scenes import DensityConfig, SceneDataset, gen_benchmark, read_dataset, read_scene, split_scenes, write_scene
from .training import train
from .verify import run_gradcheck

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3

SWEEPS = {"scenes": (5, 10, 15, 20), "gbn-layers": (1, 2, 4, 6)}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the I/O code
    def error(self, message):
        raise UsageError(message)


def parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise ValueError(f"size must look like HxW, got {text!r}")
    H, W = int(m.group(1)), int(m.group(2))
    if H <= 0 or W <= 0 or H % 8 or W % 8:
        raise ValueError(f"size {H}x{W}: both dimensions must be positive multiples of 8")
    return H, W


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# data helpers shared by train / eval / report
# ---------------------------------------------------------------------------


def load_split(data_dir: Path, cfg: RunConfig) -> tuple[list[SceneDataset], list[SceneDataset]]:
    """Seeded train/held-out split of the scenes in ``data_dir``."""
    scenes = read_dataset(data_dir, DensityConfig(sigma_dm=cfg.data.sigma_dm))
    if not scenes:
        raise ValueError(f"{data_dir}: no scenes found")
    if cfg.data.n_train >= len(scenes):
        raise ValueError(f"data.n_train={cfg.data.n_train} leaves no held-out scenes among {len(scenes)}")
    return split_scenes(scenes, cfg.data.n_train, cfg.data.seed)


def train_run(train_scenes: list[SceneDataset], cfg: RunConfig, kind: str, out: Path,
              echo: bool = True) -> None:
    model = build_model(cfg.arch, cfg.train.seed, kind=kind)
    stream = print if echo else None
    trained, log = train(train_scenes, cfg.train, model, log_stream=stream)
    extra = {"train": cfg.train.to_dict(), "data": {"n_train": cfg.data.n_train, "seed": cfg.data.seed,
             "sigma_dm": cfg.data.sigma_dm}, "train_scenes": [s.scene_id for s in train_scenes]}
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, trained, extra)
    _write_text(Path(f"{out}.log"), "\n".join(log.lines()) + "\n")
    _write_text(Path(f"{out}.log.json"), json.dumps(log.to_dict(), indent=1) + "\n")


def _heldout(data_dir: Path, ckpt_cfg: dict) -> list[SceneDataset]:
    sigma = ckpt_cfg.get("data", {}).get("sigma_dm", 1.0)
    scenes = read_dataset(data_dir, DensityConfig(sigma_dm=sigma))
    seen = set(ckpt_cfg.get("train_scenes", []))
    rest = [s for s in scenes if s.scene_id not in seen]
    return rest or scenes


def _evaluate(model, scenes, protocol: EvalProtocol) -> EvalReport:
    if model.kind == "gbn":
        return run_adaptation_eval(model, scenes, protocol)
    return run_baseline_eval(model, scenes, protocol)


def report_tsv(report: EvalReport) -> str:
    rows = ["trial\tscene_id\tmae\trmse"]
    for t in report.per_trial:
        for s in t["scenes"]:
            rows.append(f"{t['trial']}\t{s['scene_id']}\t{s['mae']:.9g}\t{s['rmse']:.9g}")
    a = report.aggregate
    rows.append(f"mean\t*\t{a['mae_mean']:.9g}\t{a['rmse_mean']:.9g}")
    rows.append(f"std\t*\t{a['mae_std']:.9g}\t{a['rmse_std']:.9g}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    H, W = parse_size(args.size)
    if args.scenes < 1:
        raise ValueError("--scenes must be >= 1")
    if args.images_per_scene < 2:
        raise ValueError("--images-per-scene must be >= 2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = gen_benchmark(args.scenes, args.images_per_scene, (H, W), args.seed)
    for s in scenes:
        write_scene(out, s)
    manifest = {"seed": args.seed, "size": [H, W], "images_per_scene": args.images_per_scene,
                "scenes": [s.scene_id for s in scenes]}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(scenes)} scenes x {args.images_per_scene} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_scenes, _ = load_split(Path(args.data), cfg)
    train_run(train_scenes, cfg, "bn" if args.bn_baseline else "gbn", Path(args.out))
    return EXIT_OK


def cmd_adapt(args) -> int:
    model, _ = load_model(args.ckpt)
    if model.kind != "gbn":
        raise ValueError("model has no GBN layers")
    scene = read_scene(args.scene)
    if args.k < 1 or args.k > len(scene):
        raise ValueError(f"K={args.k} but scene {scene.scene_id} has {len(scene)} images")
    gen = rngmod.stream(args.seed, f"adapt/{scene.scene_id}")
    idx = sorted(int(i) for i in gen.choice(len(scene), size=args.k, replace=False))
    phi = adapt(model, [scene.images[i][None] for i in idx])
    save_phi(args.out, phi, {"scene_id": scene.scene_id, "k": args.k, "seed": args.seed, "z_indices": idx})
    print(f"scene {scene.scene_id}: K={args.k} z={idx} phi width {phi.phi.shape[0]}")
    print("layer\tpart\tmean\tstd\tmin\tmax")
    for p, _ in phi.layout:
        for part, t in zip(("gamma", "beta"), slice_phi(phi, p)):
            d = t.data.astype(np.float64)
            print(f"{p}\t{part}\t{d.mean():.6g}\t{d.std():.6g}\t{d.min():.6g}\t{d.max():.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, ckpt_cfg = load_model(args.ckpt)
    baseline = None
    if args.baseline_ckpt:
        baseline, _ = load_model(args.baseline_ckpt)
        if baseline.kind != "bn":
            raise ValueError("--baseline-ckpt must be a BN baseline checkpoint")
    scenes = _heldout(Path(args.data), ckpt_cfg)
    protocol = EvalProtocol(K=args.k, trials=args.trials, seed=args.seed)
    report = _evaluate(model, scenes, protocol)
    doc = report.to_dict()
    if baseline is not None:
        base = run_baseline_eval(baseline, scenes, protocol)
        doc["baseline"] = base.to_dict()
        doc["delta"] = {
            "mae_mean": report.mae - base.mae,
            "rmse_mean": report.rmse - base.rmse,
            "relative_mae_improvement": (base.mae - report.mae) / base.mae if base.mae else 0.0,
        }
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "eval_report.json", json.dumps(doc, indent=1) + "\n")
    _write_text(out / "eval_report.tsv", report_tsv(report))
    if model.kind == "gbn":
        all_scenes = read_dataset(Path(args.data), DensityConfig(sigma_dm=ckpt_cfg.get("data", {}).get("sigma_dm", 1.0)))
        n = min(10, len(all_scenes), min(len(s) for s in all_scenes))
        if n >= 2:
            pv = phi_variance_analysis(model, all_scenes, n_images=n, seed=args.seed)
            _write_text(out / "phi_variance.tsv", pv.to_tsv())
    line = f"MAE {report.mae:.4f} +- {report.aggregate['mae_std']:.4f}  RMSE {report.rmse:.4f}"
    if baseline is not None:
        line += f"  baseline MAE {doc['baseline']['aggregate']['mae_mean']:.4f}"
    print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, tol=args.tol)
    print("\n".join(report.lines()))
    if args.out:
        _write_text(Path(args.out), json.dumps(report.to_dict(), indent=1) + "\n")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    train_scenes, test_scenes = load_split(Path(args.data), cfg)
    out = Path(args.out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in SWEEPS[args.sweep]:
        cell_path = cells_dir / f"{args.sweep}_{value}.json"
        if cell_path.exists():
            print(f"{args.sweep}={value}: cached")
            rows.append(json.loads(cell_path.read_text()))
            continue
        if args.sweep == "scenes":
            if value > len(train_scenes):
                raise ValueError(f"sweep needs {value} training scenes, split has {len(train_scenes)}")
            cell_cfg, cell_train = cfg, train_scenes[:value]
        else:
            cell_cfg = replace(cfg, arch=replace(cfg.arch, n_gbn_layers=value, guide_linear_width=None))
            cell_train = train_scenes
        ckpt = cells_dir / f"{args.sweep}_{value}.ckpt"
        train_run(cell_train, cell_cfg, "gbn", ckpt, echo=False)
        model, _ = load_model(ckpt)
        report = run_adaptation_eval(model, test_scenes, cell_cfg.eval)
        cell = {"value": value, "phi_width": cell_cfg.arch.phi_width, "n_train_scenes": len(cell_train),
                **report.aggregate}
        _write_text(cell_path, json.dumps(cell, indent=1) + "\n")
        print(f"{args.sweep}={value}: MAE {report.mae:.4f} RMSE {report.rmse:.4f}")
        rows.append(cell)
    col = "n_scenes" if args.sweep == "scenes" else "n_gbn_layers"
    lines = [f"{col}\tmae_mean\tmae_std\trmse_mean\trmse_std\tphi_width"]
    lines += [f"{r['value']}\t{r['mae_mean']:.9g}\t{r['mae_std']:.9g}\t{r['rmse_mean']:.9g}\t{r['rmse_std']:.9g}\t"
              f"{r['phi_width']}" for r in rows]
    _write_text(out / f"sweep_{args.sweep}.tsv", "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crowdadapt", description="Scene-adaptive crowd counting with guided batch normalisation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=26)
    g.add_argument("--images-per-scene", type=int, default=20)
    g.add_argument("--size", default="64x96")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the adaptive model or the BN baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--bn-baseline", action="store_true")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("adapt", help="predict phi for one scene from K unlabeled images")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--scene", required=True)
    a.add_argument("--k", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_adapt)

    e = sub.add_parser("eval", help="run the repeated-trial evaluation protocol")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--trials", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--baseline-ckpt")
    e.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", help="also write the report as JSON")
    c.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("report", help="train/evaluate across a sweep grid")
    r.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (CheckpointError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
