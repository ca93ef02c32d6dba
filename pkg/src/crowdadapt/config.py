"""Run configuration: one JSON document with ``arch``, ``train``, ``data`` and ``eval`` sections."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .evaluation import EvalProtocol
from .models import ArchConfig
from .training import TrainConfig

SECTIONS = ("arch", "train", "data", "eval")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 20
    seed: int = 0
    sigma_dm: float = 1.0

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError("data.n_train must be >= 1")
        if self.sigma_dm <= 0:
            raise ValueError("data.sigma_dm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("run config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        # every section is built (and so validated) before anything runs
        return cls(
            arch=ArchConfig.from_dict(d.get("arch", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=DataConfig.from_dict(d.get("data", {})),
            eval=EvalProtocol.from_dict(d.get("eval", {})),
        )

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "eval": self.eval.to_dict(),
        }


def load_config(path: os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(doc)
