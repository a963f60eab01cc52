"""Experiment configuration: one JSON document driving data generation,
all training stages, decoding and sweeps. Unknown keys are rejected so a
typo cannot silently fall back to a default."""

from __future__ import annotations

from dataclasses import dataclass, field

from .decoding import DecodeConfig
from .errors import InvalidArgument
from .tasks import TaskParams
from .trainer import TrainConfig
from .util import load_json


def _strict(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise InvalidArgument(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class DataConfig:
    count: int = 1000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _strict(d, cls.__dataclass_fields__, "data")
        return cls(**d)


@dataclass
class SweepConfig:
    alphas: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    waitk_ks: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    bounds: list[float] | None = None

    def __post_init__(self):
        if not self.alphas:
            raise InvalidArgument("sweep.alphas must be nonempty")
        if self.bounds is not None:
            if len(self.bounds) != 2 or not self.bounds[0] < self.bounds[1]:
                raise InvalidArgument("sweep.bounds must be [x, y] with x < y")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        _strict(d, cls.__dataclass_fields__, "sweep")
        return cls(**d)


@dataclass
class ExperimentConfig:
    task: TaskParams
    data: DataConfig
    train: dict[str, TrainConfig]
    decode: DecodeConfig
    sweep: SweepConfig
    arch: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _strict(doc, cls.__dataclass_fields__, "experiment config")
        for key in ("task", "train"):
            if key not in doc:
                raise InvalidArgument(f"experiment config is missing {key!r}")
        task_d = dict(doc["task"])
        _strict(task_d, TaskParams.__dataclass_fields__, "task")
        task = TaskParams.from_dict(task_d)
        data = DataConfig.from_dict(dict(doc.get("data", {})))
        train: dict[str, TrainConfig] = {}
        for name, sub in doc["train"].items():
            if name not in ("stage1", "stage2", "stage3"):
                raise InvalidArgument(f"unknown train section {name!r}")
            sub = dict(sub)
            _strict(sub, set(TrainConfig.__dataclass_fields__) - {"stage"}, f"train.{name}")
            train[name] = TrainConfig(stage=int(name[-1]), **sub)
        dec = dict(doc.get("decode", {}))
        _strict(dec, DecodeConfig.__dataclass_fields__, "decode")
        decode = DecodeConfig(**dec)
        sweep = SweepConfig.from_dict(dict(doc.get("sweep", {})))
        arch = dict(doc.get("arch", {}))
        from .model import ArchConfig

        _strict(
            arch,
            set(ArchConfig.__dataclass_fields__)
            - {"n_frame_symbols", "n_target_tokens", "n_source_tokens"},
            "arch",
        )
        seeds = list(doc.get("seeds", [1, 2, 3]))
        if not seeds:
            raise InvalidArgument("seeds must be nonempty")
        return cls(
            task=task, data=data, train=train, decode=decode, sweep=sweep, arch=arch, seeds=seeds
        )

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        return cls.from_dict(load_json(path))

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "data": {"count": self.data.count, "seed": self.data.seed},
            "train": {k: v.to_dict() for k, v in self.train.items()},
            "decode": {k: getattr(self.decode, k) for k in self.decode.__dataclass_fields__},
            "sweep": {
                "alphas": self.sweep.alphas,
                "waitk_ks": self.sweep.waitk_ks,
                "bounds": self.sweep.bounds,
            },
            "arch": self.arch,
            "seeds": self.seeds,
        }

    def stage_config(self, stage: int, **overrides) -> TrainConfig:
        key = f"stage{stage}"
        if key not in self.train:
            raise InvalidArgument(f"config has no train.{key} section")
        base = self.train[key].to_dict()
        base.update(overrides)
        return TrainConfig.from_dict(base)
