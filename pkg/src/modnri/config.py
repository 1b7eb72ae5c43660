"""Experiment configuration: one JSON document, validated before any work."""
from __future__ import annotations

import json
import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .anneal import MetaTestConfig, MetaTrainConfig
from .latent import LatentConfig
from .sim import SimConfig

Mode = Literal["random", "learned", "mixed"]


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimSection(_Section):
    box: float = Field(5.0, gt=0)
    spring_k: float = Field(0.1, ge=0)
    coulomb: float = Field(1.0, ge=0)
    softening: float = Field(0.1, ge=0)
    dt: float = Field(0.1, gt=0)
    substeps: int = Field(10, ge=1)
    loc_std: float = Field(0.5, gt=0)
    charged_loc_std: float = Field(1.0, gt=0)
    speed: float = Field(0.5, ge=0)
    edge_prob: float = Field(0.5, ge=0, le=1)
    charge_prob: float = Field(0.5, ge=0, le=1)


class ModelSection(_Section):
    n_edge_modules: int = Field(2, ge=1)
    n_node_modules: int = Field(1, ge=1)
    hidden: int = Field(64, ge=1)
    msg_dim: int = Field(16, ge=1)
    encoder_hidden: int = Field(64, ge=1)
    normalize: bool = True


class TrainSection(_Section):
    epochs: int = Field(300, ge=0)
    batch_size: int = Field(250, ge=1)
    sa_steps: int = Field(10, ge=1)
    gd_steps: int = Field(1, ge=1)
    decay: float = Field(0.95, gt=0, le=1)
    floor: float = Field(1e-3, gt=0, le=1)
    proposal_mode: Mode = "mixed"
    random_rate: float = Field(0.1, ge=0, le=1)
    node_proposals: float = Field(0.0, ge=0, le=1)
    lr: float = Field(3e-3, gt=0)
    proposal_lr: float = Field(1e-3, gt=0)
    train_fraction: float = Field(0.6, gt=0, lt=1)
    horizon: int = Field(1, ge=1)
    fixed_structures: Optional[Literal["truth"]] = None


class EvalSection(_Section):
    budget: int = Field(2000, ge=1)
    restart_every: int = Field(400, ge=1)
    proposal: Mode = "learned"
    random_rate: float = Field(0.1, ge=0, le=1)
    floor: float = Field(1e-3, gt=0, le=1)
    split: Literal["all", "train"] = "all"


class LatentSection(_Section):
    n_tasks: int = Field(10, ge=1)
    node: int = -1
    samples: int = Field(512, ge=1)
    top_k: int = Field(8, ge=0)
    gd_steps: int = Field(100, ge=0)
    lr: float = Field(1e-2, gt=0)
    rounds: int = Field(5, ge=1)
    clamp: bool = True
    module_map: Optional[list[int]] = None


class ExperimentConfig(_Section):
    kind: Literal["springs", "charged"] = "springs"
    seed: int = 0
    n_particles: int = Field(5, ge=2)
    T: int = Field(60, ge=2)
    train_horizon: int = Field(50, ge=2)
    test_horizon: int = Field(10, ge=0)
    n_train_tasks: int = Field(500, ge=1)
    n_test_tasks: int = Field(50, ge=1)
    out_dir: str = "out"
    sim: SimSection = SimSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    test: EvalSection = EvalSection()
    latent: LatentSection = LatentSection()

    @model_validator(mode="after")
    def _horizons(self):
        if self.train_horizon + self.test_horizon > self.T:
            raise ValueError("train_horizon + test_horizon must not exceed T")
        return self

    # derived objects

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.sim.model_dump())

    def meta_train_config(self) -> MetaTrainConfig:
        return MetaTrainConfig(seed=self.seed, **self.train.model_dump(),
                               **self.model.model_dump())

    def meta_test_config(self) -> MetaTestConfig:
        t = self.test
        return MetaTestConfig(budget=t.budget, restart_every=t.restart_every, floor=t.floor,
                              seed=self.seed, split=t.split)

    def latent_config(self) -> LatentConfig:
        d = self.latent.model_dump(exclude={"n_tasks", "node", "module_map"})
        return LatentConfig(seed=self.seed, box=self.sim.box, speed=self.sim.speed, **d)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def echo(self) -> dict:
        """Every field with defaults filled in."""
        return self.model_dump()


def load_config(path, **overrides) -> ExperimentConfig:
    """Read and validate a config file; ``overrides`` replace top-level keys when not None."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at char {e.pos}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc, path, **overrides)


def config_from_dict(doc: dict, path="<config>", **overrides) -> ExperimentConfig:
    doc = dict(doc)
    for k, v in overrides.items():
        if v is None:
            continue
        if "." in k:
            sec, key = k.split(".", 1)
            doc[sec] = {**doc.get(sec, {}), key: v}
        else:
            doc[k] = v
    try:
        return ExperimentConfig(**doc)
    except ValidationError as e:
        msgs = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: {msgs}") from None
