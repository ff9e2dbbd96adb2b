"""Experiment configuration parsed from a JSON document.

Sections: ``backbone``, ``adapter``, ``train``, ``task``, ``sweep``. Unknown
keys are rejected; every omitted key takes the dataclass default.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from larslab.adapters import ADAPTER_KINDS, AdapterSpec
from larslab.tasks import TASK_KINDS
from larslab.transformer import BackboneConfig, ConfigError

SEED_ENV = "LARSLAB_SEED"
SWEEP_DIMENSIONS = ("S", "R", "target_modules", "adapter")
ADAPTER_LABELS = ("lars", "lars-fixed", "lars-learned", "lora", "ia3")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    accum_steps: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("train.batch_size and train.accum_steps must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("train.clip_norm must be > 0")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("train.lr, weight_decay and warmup_steps must be >= 0")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "seqclass"
    S: int = 64
    num_examples: int = 256
    num_classes: int = 4
    position: int | str = "last"
    num_passkeys: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
        if self.S < 1 or self.num_examples < 1:
            raise ConfigError("task.S and task.num_examples must be >= 1")

    def make_kwargs(self, vocab: int) -> dict:
        if self.kind == "seqclass":
            return dict(S=self.S, num_classes=self.num_classes, num_examples=self.num_examples,
                        vocab=vocab, position=self.position, seed=self.seed)
        return dict(S=self.S, num_passkeys=self.num_passkeys, num_examples=self.num_examples,
                    vocab=vocab, seed=self.seed)


@dataclass(frozen=True)
class SweepConfig:
    dimension: str = "S"
    grid: tuple = (64, 128, 256, 512)
    adapters: tuple = ("lars", "lora")
    batch_size: int = 2
    train: bool = False

    def __post_init__(self):
        if self.dimension not in SWEEP_DIMENSIONS:
            raise ConfigError(f"sweep.dimension must be one of {SWEEP_DIMENSIONS}")
        for a in self.adapters:
            check_adapter_label(a)
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "adapters", tuple(self.adapters))


def check_adapter_label(label: str) -> None:
    if label not in ADAPTER_LABELS:
        raise ConfigError(f"unknown adapter {label!r}; expected one of {ADAPTER_LABELS}")


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        self.spec()  # validates the adapter section

    def spec(self, label: str | None = None, **overrides) -> AdapterSpec:
        """AdapterSpec for ``label`` (e.g. "lars-learned"), layered over the adapter section."""
        data = dict(self.adapter)
        if label is not None:
            check_adapter_label(label)
            kind, _, pooling = label.partition("-")
            if kind != data.get("kind", "lars"):
                data.pop("targets", None)  # each kind has its own default sites
            data["kind"] = kind
            if pooling:
                data["pooling"] = pooling
        data.update(overrides)
        return AdapterSpec(**data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            backbone=replace(self.backbone, seed=seed),
            train=replace(self.train, seed=seed),
            task=replace(self.task, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone),
            "adapter": self.spec().to_dict(),
            "train": asdict(self.train),
            "task": asdict(self.task),
            "sweep": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.sweep).items()},
        }


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name!r}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    sections = {"backbone", "adapter", "train", "task", "sweep"}
    unknown = sorted(set(data) - sections)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    adapter = data.get("adapter", {})
    _section(AdapterSpec, adapter, "adapter")
    if "kind" in adapter and adapter["kind"] not in ADAPTER_KINDS:
        raise ConfigError(f"adapter.kind must be one of {ADAPTER_KINDS}")
    cfg = ExperimentConfig(
        backbone=_section(BackboneConfig, data.get("backbone", {}), "backbone"),
        adapter=dict(adapter),
        train=_section(TrainConfig, data.get("train", {}), "train"),
        task=_section(TaskConfig, data.get("task", {}), "task"),
        sweep=_section(SweepConfig, data.get("sweep", {}), "sweep"),
    )
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg = cfg.with_seed(int(env_seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    return cfg


def load(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return from_dict({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return from_dict(data)
