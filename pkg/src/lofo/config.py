"""Validated experiment configuration and named presets.

A config is one JSON document. Unknown keys anywhere are rejected, and
everything is checked before any compute starts.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from .dyna import MINIGRID_AGENT, MOUNTAINCAR_AGENT, AgentConfig, NetSpec
from .locality import MINIGRID_EMBEDDING, EmbeddingConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BufferConfig(_Strict):
    kind: Literal["fifo", "reservoir", "lofo"] = "lofo"
    capacity: Optional[PositiveInt] = None
    d_local: Optional[PositiveFloat] = None
    n_local: Optional[PositiveInt] = None

    @model_validator(mode="after")
    def _complete(self):
        if self.kind in ("fifo", "reservoir") and self.capacity is None:
            raise ValueError(f"a {self.kind} buffer needs a capacity")
        if self.kind == "lofo" and (self.d_local is None or self.n_local is None):
            raise ValueError("a lofo buffer needs d_local and n_local")
        return self


class EmbeddingSettings(_Strict):
    hidden: list[PositiveInt] = [64, 64, 64]
    embed_dim: PositiveInt = 16
    activation: Literal["tanh", "relu"] = "tanh"
    lr: PositiveFloat = 1e-4
    beta: PositiveFloat = 10.0
    num_negatives: PositiveInt = 128
    batch_size: PositiveInt = 32
    epochs: int = Field(5, ge=0)
    collect_steps: int = Field(100_000, ge=2)

    def build(self) -> EmbeddingConfig:
        return EmbeddingConfig(**self.model_dump())


class LocalityConfig(_Strict):
    source: Literal["learned", "handcrafted", "snapshot", "none"] = "learned"
    snapshot: Optional[str] = None
    seed: int = 0
    embedding: EmbeddingSettings = EmbeddingSettings()

    @model_validator(mode="after")
    def _snapshot_path(self):
        if self.source == "snapshot" and not self.snapshot:
            raise ValueError("locality source 'snapshot' needs a snapshot path")
        return self


class NetSettings(_Strict):
    hidden: list[PositiveInt]
    activation: Literal["tanh", "relu"] = "tanh"
    inject_after: Optional[PositiveInt] = None


class AgentSettings(_Strict):
    gamma: float = Field(0.99, gt=0, lt=1)
    epsilon: float = Field(0.5, ge=0, le=1)
    value_lr: PositiveFloat = 5e-6
    model_lr: PositiveFloat = 5e-5
    model_steps: int = Field(5, ge=0)
    planning_steps: int = Field(5, ge=0)
    model_batch: PositiveInt = 32
    planning_batch: PositiveInt = 32
    warmup_steps: int = Field(50_000, ge=0)
    target_sync: PositiveInt = 500
    model_net: NetSettings = NetSettings(hidden=[64, 64, 63, 64, 64], inject_after=3)
    dynamics_net: Optional[NetSettings] = None
    q_net: NetSettings = NetSettings(hidden=[64, 64, 64, 64])
    dtype: Literal["float32", "float64"] = "float32"

    def build(self) -> AgentConfig:
        d = self.model_dump()
        for name in ("model_net", "dynamics_net", "q_net"):
            if d[name] is not None:
                d[name] = NetSpec(**d[name])
        return AgentConfig(**d)


class ScheduleConfig(_Strict):
    phase1_steps: PositiveInt
    phase2_steps: PositiveInt
    eval_period: PositiveInt = 10_000
    eval_episodes: PositiveInt = 10

    @model_validator(mode="after")
    def _evals_fit(self):
        if self.eval_period > self.phase1_steps + self.phase2_steps:
            raise ValueError("eval_period longer than the whole run")
        return self


class GridConfig(_Strict):
    """Histogram/heatmap resolution for continuous state spaces."""

    x_bins: PositiveInt = 20
    y_bins: PositiveInt = 20


class ExperimentConfig(_Strict):
    name: str = "experiment"
    env: Literal["mountaincar", "minigrid"]
    encoding: Literal["onehot", "coarse-image"] = "onehot"
    buffer: BufferConfig
    locality: LocalityConfig = LocalityConfig()
    agent: AgentSettings = AgentSettings()
    schedule: ScheduleConfig
    grid: GridConfig = GridConfig()
    seeds: list[int] = [0]
    workers: PositiveInt = 1
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.buffer.kind == "lofo" and self.locality.source == "none":
            raise ValueError("a lofo buffer needs a locality source")
        if self.locality.source == "handcrafted" and self.env != "mountaincar":
            raise ValueError("the handcrafted locality only exists for mountaincar")
        if self.env == "minigrid" and self.encoding != "onehot":
            raise ValueError("only the onehot MiniGrid encoding has dense agent networks")
        return self

    @property
    def total_steps(self) -> int:
        return self.schedule.phase1_steps + self.schedule.phase2_steps

    def resolved(self) -> dict:
        """Fully expanded config, suitable for writing next to artifacts."""
        return self.model_dump(mode="json")


def _agent_settings(cfg: AgentConfig) -> dict:
    return cfg.to_dict()


def _embedding_settings(cfg: EmbeddingConfig) -> dict:
    d = dict(cfg.__dict__)
    d["hidden"] = list(cfg.hidden)
    return d


def _preset_dicts() -> dict:
    mc = {
        "env": "mountaincar",
        "buffer": {"kind": "lofo", "d_local": 0.005, "n_local": 1},
        "locality": {"source": "learned", "embedding": _embedding_settings(EmbeddingConfig())},
        "agent": _agent_settings(MOUNTAINCAR_AGENT),
        "schedule": {"phase1_steps": 1_500_000, "phase2_steps": 3_000_000,
                     "eval_period": 10_000, "eval_episodes": 10},
        "seeds": list(range(10)),
    }
    mc_lite = json.loads(json.dumps(mc))
    mc_lite["locality"]["embedding"]["collect_steps"] = 20_000
    mc_lite["agent"]["warmup_steps"] = 5_000
    mc_lite["schedule"] = {"phase1_steps": 100_000, "phase2_steps": 100_000,
                           "eval_period": 10_000, "eval_episodes": 10}
    mc_lite["seeds"] = [0]
    grid = {
        "env": "minigrid",
        "encoding": "onehot",
        "buffer": {"kind": "lofo", "d_local": 0.001, "n_local": 100},
        "locality": {"source": "learned", "embedding": _embedding_settings(MINIGRID_EMBEDDING)},
        "agent": _agent_settings(MINIGRID_AGENT),
        "schedule": {"phase1_steps": 300_000, "phase2_steps": 1_500_000,
                     "eval_period": 10_000, "eval_episodes": 10},
        "seeds": list(range(10)),
    }
    grid_lite = json.loads(json.dumps(grid))
    grid_lite["schedule"] = {"phase1_steps": 100_000, "phase2_steps": 200_000,
                             "eval_period": 10_000, "eval_episodes": 10}
    grid_lite["seeds"] = list(range(5))
    return {"mountaincar": mc, "mountaincar-lite": mc_lite, "minigrid": grid,
            "minigrid-lite": grid_lite}


PRESETS = tuple(_preset_dicts())


def preset(name: str) -> dict:
    presets = _preset_dicts()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(presets)}")
    d = presets[name]
    d["name"] = name
    return d


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, preset_name=None, overrides: dict | None = None) -> ExperimentConfig:
    """Precedence, lowest first: preset, config file, explicit overrides."""
    doc = preset(preset_name) if preset_name else {}
    if path is not None:
        doc = deep_merge(doc, json.loads(Path(path).read_text()))
    if overrides:
        doc = deep_merge(doc, overrides)
    return ExperimentConfig.model_validate(doc)
