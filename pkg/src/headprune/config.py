"""Experiment configuration files (JSON, validated, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .gumbel import TemperatureSchedule
from .model import ModelConfig

TASKS = {"needle-classification": "classifier", "sequence-reversal": "seq2seq"}
PRUNERS = ("none", "michel", "pipelined-dsp", "voita", "ste", "joint-dsp")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    n_layers: int = Field(2, ge=1)
    n_dec_layers: int = Field(0, ge=0)
    n_heads: int = Field(4, ge=1)
    d_model: int = Field(32, ge=1)
    d_head: Optional[int] = Field(None, ge=1)
    d_ff: Optional[int] = Field(None, ge=1)


class DataSection(_Strict):
    vocab: int = Field(8, ge=4)
    length: int = Field(12, ge=4)
    train_size: int = Field(4000, ge=1)
    val_size: int = Field(500, ge=1)
    heldout_size: int = Field(512, ge=1)


class ScheduleSection(_Strict):
    tau_ini: float = Field(1000.0, gt=0)
    tau_end: float = Field(1e-8, gt=0)
    n_cooldown: int = Field(25000, ge=1)
    anneal: bool = True

    def schedule(self) -> TemperatureSchedule:
        if not self.anneal:
            return TemperatureSchedule(self.tau_ini, self.tau_ini, self.n_cooldown)
        return TemperatureSchedule(self.tau_ini, self.tau_end, self.n_cooldown)


class ExperimentConfig(_Strict):
    task: Literal["needle-classification", "sequence-reversal"] = "needle-classification"
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    pruner: Literal["none", "michel", "pipelined-dsp", "voita", "ste", "joint-dsp"] = "joint-dsp"
    k_list: list[int] = [2]
    lambda_list: list[float] = [0.01]
    schedule: ScheduleSection = ScheduleSection()
    lr_theta: float = Field(0.1, gt=0)
    lr_w: float = Field(0.5, ge=0)
    optimizer_theta: Literal["sgd", "adam"] = "sgd"
    optimizer_w: Literal["sgd", "adam"] = "sgd"
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(4, ge=1)
    finetune_steps: int = Field(0, ge=0)
    importance_data: Literal["heldout", "train"] = "heldout"
    michel_block: Optional[int] = Field(None, ge=1)
    voita_phi_init: float = 3.0
    voita_beta: float = Field(2.0 / 3.0, gt=0)
    seeds: list[int] = [0]
    out_dir: str = "runs"

    @model_validator(mode="after")
    def _check(self):
        kind = TASKS[self.task]
        if kind == "seq2seq" and self.model.n_dec_layers < 1:
            raise ValueError("sequence-reversal needs model.n_dec_layers >= 1")
        if kind == "classifier" and self.model.n_dec_layers:
            raise ValueError("needle-classification has no decoder layers")
        H = self.build_model_config().total_heads
        bad = [k for k in self.k_list if not 1 <= k <= H]
        if bad:
            raise ValueError(f"K values {bad} outside [1, {H}]")
        if any(lam < 0 for lam in self.lambda_list):
            raise ValueError("lambda values must be non-negative")
        if not self.seeds:
            raise ValueError("need at least one seed")
        return self

    def build_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            task=TASKS[self.task],
            n_layers=m.n_layers,
            n_dec_layers=m.n_dec_layers,
            n_heads=m.n_heads,
            d_model=m.d_model,
            d_head=m.d_head,
            d_ff=m.d_ff,
            vocab_size=self.data.vocab,
            max_len=self.data.length,
        )

    @property
    def total_heads(self) -> int:
        return self.build_model_config().total_heads

    def steps_per_epoch(self) -> int:
        return -(-self.data.train_size // self.batch_size)

    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch()


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
