"""Experiment configuration: an INI file with one section per component.

Example::

    [experiment]
    name = estimate-qgnn
    env = estimate
    model = qgnn
    mixer = qgnn
    seeds = 0, 1
    total_env_steps = 200000

    [env]
    n_agents = 8
    density = 0.2

Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .agents import MODELS
from .envs import ENVIRONMENTS
from .mixers import MIXERS
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    name: str = "run"
    env: str = "estimate"
    model: str = "qgnn"
    mixer: str = "qgnn"
    seeds: Tuple[int, ...] = (0,)
    total_env_steps: int = 200_000
    eval_interval: int = 1000
    eval_episodes: int = 32
    checkpoint_interval: int = 0
    output_dir: str = "runs"


@dataclass
class EnvSection:
    n_agents: int = 8
    episode_limit: int = 1
    density: float = 0.2
    n_tasks: int = 4
    gamma_shape: float = 2.0
    gamma_scale: float = 1.0
    empty_penalty: float = -10.0
    payoff: str = "1,0;0,1"


@dataclass
class ModelSection:
    hidden: int = 64
    last_action: bool = True
    agent_id: bool = False
    activation: str = "elu"
    n_heads: int = 4
    head_dim: int = 16


@dataclass
class MixerSection:
    qmix_embed: int = 32
    hypernet_hidden: int = 64
    qgnn_width: int = 12
    qgnn_outer_hidden: int = 12
    activation: str = "elu"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    SECTIONS = ("experiment", "env", "model", "mixer", "trainer")

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        if e.env not in ENVIRONMENTS:
            raise ConfigError(f"experiment.env: unknown environment {e.env!r}; choose from {sorted(ENVIRONMENTS)}")
        if e.model not in MODELS:
            raise ConfigError(f"experiment.model: unknown model {e.model!r}; choose from {list(MODELS)}")
        if e.mixer not in MIXERS:
            raise ConfigError(f"experiment.mixer: unknown mixer {e.mixer!r}; choose from {list(MIXERS)}")
        if not e.seeds:
            raise ConfigError("experiment.seeds: at least one seed is required")
        if e.total_env_steps < 0:
            raise ConfigError("experiment.total_env_steps must be >= 0")
        if e.eval_interval < 1 or e.eval_episodes < 1:
            raise ConfigError("experiment.eval_interval and eval_episodes must be positive")
        if not 0.0 <= self.env.density <= 1.0:
            raise ConfigError("env.density must lie in [0, 1]")
        if self.env.n_agents < 1 or self.env.episode_limit < 1 or self.env.n_tasks < 1:
            raise ConfigError("env.n_agents, env.episode_limit and env.n_tasks must be positive")
        try:
            self.payoff_matrix()
        except ValueError as exc:
            raise ConfigError(f"env.payoff: {exc}")
        t = self.trainer
        if t.batch_size < 1 or t.buffer_size < t.batch_size:
            raise ConfigError("trainer.buffer_size must be >= trainer.batch_size >= 1")
        if not (0 <= t.gamma <= 1 and 0 <= t.lam <= 1):
            raise ConfigError("trainer.gamma and trainer.lam must lie in [0, 1]")
        if t.lr <= 0 or t.target_update_interval < 1:
            raise ConfigError("trainer.lr and trainer.target_update_interval must be positive")
        return self

    def payoff_matrix(self) -> np.ndarray:
        rows = [r for r in self.env.payoff.split(";") if r.strip()]
        table = np.array([[float(v) for v in r.split(",")] for r in rows])
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError(f"payoff must be a square table, got {self.env.payoff!r}")
        return table

    # -- identity -----------------------------------------------------------

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: dataclasses.asdict(getattr(self, s)) for s in self.SECTIONS}

    def hash(self) -> str:
        """Digest of everything that affects a run's trajectory.

        Bookkeeping keys (name, seeds, step budget, output and checkpoint
        settings) are excluded, so resuming with a larger budget is allowed.
        """
        d = self.to_dict()
        for key in ("name", "seeds", "total_env_steps", "checkpoint_interval", "output_dir"):
            d["experiment"].pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def run_id(self) -> str:
        return f"{self.experiment.name}:{self.experiment.model}--{self.experiment.mixer}"

    # -- io -----------------------------------------------------------------

    @classmethod
    def from_mapping(cls, data: Dict[str, Dict[str, Any]]) -> "ExperimentConfig":
        cfg = cls()
        for section, values in data.items():
            if section not in cls.SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            for key, raw in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(target, key, _coerce(known[key], raw, f"{section}.{key}"))
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        return cls.from_mapping({s: dict(parser[s]) for s in parser.sections()})

    def with_overrides(self, overrides: List[str]) -> "ExperimentConfig":
        data = self.to_dict()
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            data.setdefault(section, {})[key] = value.strip()
        return ExperimentConfig.from_mapping(data)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, (list, tuple)):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini())


def _coerce(f: dataclasses.Field, raw: Any, where: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("Tuple"):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).replace(" ", "").split(",") if v)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError(f"not an integer: {raw!r}")
            return int(value)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}")
