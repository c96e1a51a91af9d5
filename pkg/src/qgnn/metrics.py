"""Evaluation metrics: correlation of local values with rewards, headline stats."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .agents import AgentModel
from .envs import MultiAgentEnv
from .trainer import EpisodeBatch, rollout_episode

CSV_SCHEMA = "qgnn-metrics/1"
CSV_COLUMNS = ("run_id", "seed", "env_steps", "mean_reward", "loss", "epsilon", "corr_local", "corr_global")


class UndefinedCorrelation(ValueError):
    """Correlation is undefined for constant inputs."""


def pearson_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two samples")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelation("correlation undefined: an input is constant")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def correlation_from_episodes(episodes: EpisodeBatch) -> Tuple[Optional[float], Optional[float]]:
    """Pooled (corr_local, corr_global) over every (episode, step, agent).

    Returns ``None`` for a correlation that is undefined on this sample.
    """
    if episodes.local_rewards is None or episodes.q_taken is None:
        raise ValueError("episodes carry no ground-truth local rewards")
    q = episodes.q_taken.ravel()
    local = episodes.local_rewards.ravel()
    glob = np.broadcast_to(episodes.reward[..., None], episodes.q_taken.shape).ravel()
    out = []
    for target in (local, glob):
        try:
            out.append(pearson_correlation(q, target))
        except UndefinedCorrelation:
            out.append(None)
    return out[0], out[1]


def collect_correlation(model: AgentModel, env: MultiAgentEnv, episodes: int,
                        rng: np.random.Generator) -> Tuple[Optional[float], Optional[float]]:
    """Greedy episodes -> correlation of taken-action q-values with local and global rewards."""
    if not env.has_local_rewards:
        raise ValueError(f"{type(env).__name__} exposes no ground-truth local rewards")
    batch = EpisodeBatch.concat([rollout_episode(env, model, 0.0, rng) for _ in range(episodes)])
    return correlation_from_episodes(batch)


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------

def format_value(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def write_metrics_csv(path, rows: Iterable[dict]):
    buf = io.StringIO()
    buf.write(f"# schema: {CSV_SCHEMA}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in CSV_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema:"):
        raise ValueError(f"{path}: missing schema line")
    schema = lines[0].split(":", 1)[1].strip()
    if schema != CSV_SCHEMA:
        raise ValueError(f"{path}: unsupported metrics schema {schema!r}")
    reader = csv.DictReader(lines[1:])
    rows = []
    for raw in reader:
        row = {}
        for key, value in raw.items():
            if key in ("run_id",):
                row[key] = value
            elif key in ("seed", "env_steps"):
                row[key] = int(value)
            else:
                row[key] = float(value) if value != "" else None
        rows.append(row)
    return rows


# ----------------------------------------------------------------------------
# Summaries
# ----------------------------------------------------------------------------

def curves_by_seed(rows: Sequence[dict], metric: str) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    per_seed = defaultdict(list)
    for row in rows:
        if row.get(metric) is not None:
            per_seed[row["seed"]].append((row["env_steps"], row[metric]))
    return {s: (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
            for s, pts in sorted(per_seed.items())}


def aggregate_curve(rows: Sequence[dict], metric: str):
    """Steps evaluated by every seed, with mean, min and max across seeds."""
    curves = curves_by_seed(rows, metric)
    if not curves:
        return np.array([]), np.array([]), np.array([]), np.array([])
    common = sorted(set.intersection(*(set(x.tolist()) for x, _ in curves.values())))
    table = np.array([[dict(zip(x.tolist(), y.tolist()))[s] for s in common] for x, y in curves.values()])
    return np.array(common), table.mean(axis=0), table.min(axis=0), table.max(axis=0)


def max_of_mean(rows: Sequence[dict], metric: str) -> Optional[float]:
    """Mean across seeds at each evaluation point, then the maximum over points."""
    steps, mean, _, _ = aggregate_curve(rows, metric)
    return float(mean.max()) if mean.size else None


def final_mean(rows: Sequence[dict], metric: str) -> Optional[float]:
    steps, mean, _, _ = aggregate_curve(rows, metric)
    return float(mean[-1]) if mean.size else None
