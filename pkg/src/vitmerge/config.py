"""Experiment configuration: a schema-versioned YAML (or JSON) file."""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vitmerge import ConfigError
from vitmerge.data import FAMILIES, SyntheticTaskSpec
from vitmerge.gate import STRATEGIES
from vitmerge.train import GateConfig, TrainConfig
from vitmerge.vit import ViTConfig

SCHEMA_VERSION = 1
METHOD_CHOICES = ("avgmean", "taskarith", "regmean", "gated-avgmean", "gated-regmean")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4


class TaskSection(_Strict):
    family: str
    num_classes: int = Field(4, ge=2)
    noise_std: float = Field(1.0, ge=0)
    seed: int = 0

    @field_validator("family")
    @classmethod
    def _known_family(cls, v):
        if v not in FAMILIES:
            raise ValueError(f"unknown family {v!r}; choose from {sorted(FAMILIES)}")
        return v


class DataSection(_Strict):
    train_per_task: int = Field(800, ge=1)
    test_per_task: int = Field(400, ge=1)


class TrainSection(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)


class GateSection(_Strict):
    hidden: List[int] = [64]
    frac: float = Field(0.15, gt=0, le=1)
    train: TrainSection = TrainSection(epochs=40, batch_size=32)


class MergeSection(_Strict):
    methods: List[Literal[METHOD_CHOICES]] = list(METHOD_CHOICES)
    lam: float = Field(0.5, ge=0, alias="lambda")
    alpha: float = Field(0.9, gt=0, le=1)
    strategy: str = "concat-combined"
    classifier_choice: int = Field(1, ge=1)
    m_sweep: List[int] = [0, 1, 2, 4]

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v):
        if v not in STRATEGIES:
            raise ValueError(f"unknown strategy {v!r}; choose from {sorted(STRATEGIES)}")
        return v

    @field_validator("m_sweep")
    @classmethod
    def _non_negative(cls, v):
        if any(m < 0 for m in v):
            raise ValueError("m values must be >= 0")
        return v


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    model: ModelSection = ModelSection()
    tasks: List[TaskSection]
    data: DataSection = DataSection()
    pretrain: TrainSection = TrainSection()
    finetune: TrainSection = TrainSection(epochs=15, learning_rate=0.02)
    scratch: TrainSection = TrainSection()
    gate: GateSection = GateSection()
    merge: MergeSection = MergeSection()
    seeds: List[int] = [0]
    out_dir: str = "runs/default"

    @model_validator(mode="after")
    def _checks(self):
        if len(self.tasks) < 2:
            raise ValueError("at least 2 tasks are required")
        if self.merge.classifier_choice > len(self.tasks):
            raise ValueError("merge.classifier_choice exceeds the number of tasks")
        ViTConfig(**self.model.model_dump())
        return self

    # -- typed views -----------------------------------------------------

    def vit_config(self, num_classes: int = 4) -> ViTConfig:
        return ViTConfig(**self.model.model_dump(), num_classes=num_classes)

    def task_specs(self) -> List[SyntheticTaskSpec]:
        return [SyntheticTaskSpec(i + 1, t.num_classes, t.family, t.noise_std, t.seed)
                for i, t in enumerate(self.tasks)]

    def gate_config(self) -> GateConfig:
        m = self.model
        return GateConfig((m.channels, m.image_size, m.image_size), len(self.tasks), tuple(self.gate.hidden))

    @staticmethod
    def train_config(section: TrainSection, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **section.model_dump())

    def dump(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def derive_seed(run_seed: int, name: str) -> int:
    """Named sub-seed of a run seed; stable across platforms."""
    ss = np.random.SeedSequence([int(run_seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{path}: {err['msg']}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)
