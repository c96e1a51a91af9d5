"""Train/evaluate loop for one configuration across seeds."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .agents import AgentModel, make_model
from .config import ExperimentConfig
from .envs import CoalitionEnv, CSGInstance, EstimateGame, MatrixGame, MultiAgentEnv
from .metrics import (correlation_from_episodes, max_of_mean, final_mean, write_metrics_csv)
from .mixers import Mixer, make_mixer
from .plots import write_learning_curve
from .trainer import (EpisodeBatch, NonFiniteLossError, ReplayBuffer, TrainState, load_checkpoint,
                      rollout_episode, save_checkpoint)

log = logging.getLogger(__name__)


class RunFailure(RuntimeError):
    """A run stopped on a runtime error (non-finite loss, oracle guard, ...)."""


def build_env(cfg: ExperimentConfig) -> MultiAgentEnv:
    e = cfg.env
    kind = cfg.experiment.env
    if kind == "estimate":
        return EstimateGame(e.n_agents, e.density, e.episode_limit)
    if kind == "csg":
        return CoalitionEnv(e.n_agents, e.n_tasks, e.episode_limit, e.gamma_shape, e.gamma_scale,
                            e.empty_penalty)
    if kind == "matrix":
        return MatrixGame(cfg.payoff_matrix(), e.episode_limit)
    raise ValueError(f"unknown environment {kind!r}")


def build_model(cfg: ExperimentConfig, env: MultiAgentEnv) -> AgentModel:
    m, s = cfg.model, env.spec
    kw = dict(last_action=m.last_action, agent_id=m.agent_id, activation=m.activation)
    if cfg.experiment.model.startswith("attention"):
        kw.update(n_heads=m.n_heads, head_dim=m.head_dim)
    return make_model(cfg.experiment.model, s.obs_dim, s.n_actions, s.n_agents, m.hidden, **kw)


def build_mixer(cfg: ExperimentConfig, env: MultiAgentEnv) -> Mixer:
    m, s = cfg.mixer, env.spec
    kind = cfg.experiment.mixer
    if kind == "qmix":
        return make_mixer(kind, s.n_agents, s.state_dim, embed=m.qmix_embed,
                          hypernet_hidden=m.hypernet_hidden, activation=m.activation)
    if kind == "qgnn":
        return make_mixer(kind, s.n_agents, s.state_dim, width=m.qgnn_width,
                          outer_hidden=m.qgnn_outer_hidden, activation=m.activation)
    return make_mixer(kind, s.n_agents, s.state_dim)


class Run:
    """One seed of one configuration: collect an episode, then one update."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        torch.manual_seed(self.seed)
        self.env = build_env(cfg)
        self.eval_env = build_env(cfg)
        model = build_model(cfg, self.env)
        mixer = build_mixer(cfg, self.env)
        self.state = TrainState(model, mixer, cfg.trainer)
        self.buffer = ReplayBuffer(cfg.trainer.buffer_size)
        self.rng = np.random.default_rng(self.seed)
        self.pending_losses: List[float] = []
        self.rows: List[dict] = []
        self.next_eval = cfg.experiment.eval_interval

    @property
    def env_steps(self) -> int:
        return self.state.counters.env_steps

    @property
    def model(self) -> AgentModel:
        return self.state.model

    @property
    def mixer(self) -> Mixer:
        return self.state.mixer

    def collect_and_train(self) -> Optional[dict]:
        episode = rollout_episode(self.env, self.model, self.state.epsilon, self.rng)
        self.buffer.insert(episode)
        self.state.counters.env_steps += episode.episode_length
        self.state.counters.episodes += 1
        metrics = self.state.train_step(self.buffer, self.rng)
        if metrics is not None:
            self.pending_losses.append(metrics["loss"])
        return metrics

    def run_until(self, total_env_steps: int, on_row: Optional[Callable[[dict], None]] = None,
                  checkpoint_every: int = 0, checkpoint_path=None):
        last_ckpt = self.env_steps
        while self.env_steps < total_env_steps:
            self.collect_and_train()
            while self.env_steps >= self.next_eval:
                row = self.evaluate_row()
                self.rows.append(row)
                if on_row:
                    on_row(row)
                self.next_eval += self.cfg.experiment.eval_interval
            if checkpoint_every and checkpoint_path and self.env_steps - last_ckpt >= checkpoint_every:
                self.save(checkpoint_path)
                last_ckpt = self.env_steps
        return self.rows

    # -- evaluation -------------------------------------------------------------

    def eval_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0x5EED, index])

    def greedy_episodes(self, episodes: int, rng: np.random.Generator) -> EpisodeBatch:
        return EpisodeBatch.concat([rollout_episode(self.eval_env, self.model, 0.0, rng)
                                    for _ in range(episodes)])

    def evaluate_row(self) -> dict:
        index = self.next_eval // self.cfg.experiment.eval_interval
        batch = self.greedy_episodes(self.cfg.experiment.eval_episodes, self.eval_rng(index))
        corr_local = corr_global = None
        if batch.local_rewards is not None:
            corr_local, corr_global = correlation_from_episodes(batch)
        loss = float(np.mean(self.pending_losses)) if self.pending_losses else None
        self.pending_losses = []
        return {
            "run_id": self.cfg.run_id,
            "seed": self.seed,
            "env_steps": self.env_steps,
            "mean_reward": float(batch.reward.sum(axis=1).mean()),
            "loss": loss,
            "epsilon": self.state.epsilon,
            "corr_local": corr_local,
            "corr_global": corr_global,
        }

    @torch.no_grad()
    def greedy_value_on(self, instance: CSGInstance) -> float:
        """Return of one greedy episode on a fixed coalition instance."""
        env = self.eval_env
        if not isinstance(env, CoalitionEnv):
            raise TypeError("greedy_value_on needs a coalition environment")
        obs = env.set_instance(instance)
        mask = torch.from_numpy(env.graph.adjacency(include_self=True))
        h = self.model.init_hidden()
        prev = torch.zeros(env.spec.n_agents, env.spec.n_actions)
        total = 0.0
        for _ in range(env.spec.episode_limit):
            q, h = self.model(torch.from_numpy(obs), prev, h, mask)
            actions = q.argmax(dim=-1).numpy()
            res = env.step(actions)
            total += res.global_reward
            prev = torch.nn.functional.one_hot(torch.from_numpy(actions), env.spec.n_actions).float()
            obs = res.observations
            if res.done:
                break
        return total

    # -- persistence ------------------------------------------------------------

    def extra_state(self) -> dict:
        return {
            "seed": self.seed,
            "config_ini": self.cfg.to_ini(),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "buffer": self.buffer.state_dict(),
            "pending_losses": list(self.pending_losses),
            "rows": [dict(r) for r in self.rows],
            "next_eval": self.next_eval,
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state, self.cfg.hash(), self.extra_state())

    @classmethod
    def from_checkpoint(cls, path, cfg: ExperimentConfig) -> "Run":
        payload = load_checkpoint(path, expected_config_hash=cfg.hash())
        extra = payload["extra"]
        run = cls(cfg, extra["seed"])
        run.state.load_state_dict(payload["train_state"])
        run.rng.bit_generator.state = extra["rng"]
        torch.set_rng_state(extra["torch_rng"])
        run.buffer.load_state_dict(extra["buffer"])
        run.pending_losses = list(extra["pending_losses"])
        run.rows = [dict(r) for r in extra["rows"]]
        run.next_eval = int(extra["next_eval"])
        return run


def checkpoint_path(cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None) -> Path:
    out = Path(out_dir or cfg.experiment.output_dir)
    return out / "checkpoints" / f"seed{seed}.pt"


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool = False,
                   on_row: Optional[Callable[[dict], None]] = None, plots: bool = True) -> Dict:
    """Train every seed, then write ``metrics.csv``, ``summary.json``,
    checkpoints, and learning-curve SVGs into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir or cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    rows: List[dict] = []
    runs = {}
    for seed in cfg.experiment.seeds:
        ckpt = checkpoint_path(cfg, seed, out)
        if resume and ckpt.exists():
            run = Run.from_checkpoint(ckpt, cfg)
            log.info("resumed seed %d at %d env steps", seed, run.env_steps)
        else:
            run = Run(cfg, seed)
        try:
            run.run_until(cfg.experiment.total_env_steps, on_row,
                          cfg.experiment.checkpoint_interval, ckpt)
        except NonFiniteLossError as exc:
            dump = run.save(out / "checkpoints" / f"seed{seed}-failure.pt")
            raise RunFailure(f"seed {seed}: {exc}; state dumped to {dump}") from exc
        run.save(ckpt)
        rows.extend(run.rows)
        runs[seed] = run
    write_metrics_csv(out / "metrics.csv", rows)
    summary = summarize(rows)
    summary["run_id"] = cfg.run_id
    summary["config_hash"] = cfg.hash()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plots:
        write_plots(out, [(cfg.run_id, rows)])
    return {"rows": rows, "summary": summary, "runs": runs, "out_dir": out}


def summarize(rows: Sequence[dict]) -> dict:
    summary = {}
    for metric in ("mean_reward", "corr_local", "corr_global"):
        best = max_of_mean(rows, metric)
        if best is not None:
            summary[f"max_mean_{metric}"] = best
            summary[f"final_mean_{metric}"] = final_mean(rows, metric)
    return summary


def write_plots(out: Path, series) -> List[Path]:
    paths = [write_learning_curve(out / "reward.svg", series, "mean_reward", "Mean greedy reward")]
    if any(r.get("corr_local") is not None for _, rows in series for r in rows):
        paths.append(write_learning_curve(out / "corr_local.svg", series, "corr_local",
                                          "Correlation of local q with ground-truth local reward"))
        paths.append(write_learning_curve(out / "corr_global.svg", series, "corr_global",
                                          "Correlation of local q with global reward"))
    return paths


SWEEP_MODELS = ("local", "qgnn", "attention", "attention-graph")
SWEEP_MIXERS = ("vdn", "qmix", "qgnn")


def sweep_configs(base: ExperimentConfig, models=SWEEP_MODELS, mixers=SWEEP_MIXERS) -> List[ExperimentConfig]:
    configs = []
    for model in models:
        for mixer in mixers:
            exp = replace(base.experiment, model=model, mixer=mixer,
                          output_dir=str(Path(base.experiment.output_dir) / f"{model}--{mixer}"))
            configs.append(replace(base, experiment=exp).validate())
    return configs


def _run_config_for_sweep(cfg: ExperimentConfig):
    result = run_experiment(cfg)
    return cfg.run_id, result["rows"], result["summary"]


def run_sweep(base: ExperimentConfig, jobs: int = 1, models=SWEEP_MODELS, mixers=SWEEP_MIXERS) -> Dict:
    configs = sweep_configs(base, models, mixers)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_config_for_sweep, configs))
    else:
        results = [_run_config_for_sweep(c) for c in configs]
    out = Path(base.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_rows = [r for _, rows, _ in results for r in rows]
    write_metrics_csv(out / "metrics.csv", all_rows)
    write_plots(out, [(run_id, rows) for run_id, rows, _ in results])
    summary = {run_id: s for run_id, _, s in results}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
