"""Long training runs behind the learning-based acceptance criteria.

Each run is cached under ``artifacts/acceptance/<name>-<key>/`` where the key
combines the config hash with a digest of every source file that influences a
training trajectory, so a cached result is reused only for identical code and
configuration. Run this module directly to (re)build the cache::

    python3 tests/acceptance_runs.py            # all runs
    python3 tests/acceptance_runs.py estimate-qgnn
"""
from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from qgnn.config import ExperimentConfig
from qgnn.envs import CSGInstance
from qgnn.metrics import read_metrics_csv
from qgnn.oracles import csg_bruteforce_oracle, greedy_assignment_value

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / "artifacts" / "acceptance"
TRAJECTORY_SOURCES = ("graph", "envs", "layers", "agents", "mixers", "trainer", "experiment",
                      "config", "metrics")

ESTIMATE_STEPS = 200_000
CSG_STEPS = 200_000
CSG_HELD_OUT = 100
CSG_HELD_OUT_SEED = 20_240_101


def _estimate(model, mixer):
    return {"experiment": {"name": f"estimate-{mixer}", "env": "estimate", "model": model,
                           "mixer": mixer, "seeds": "0,1", "total_env_steps": ESTIMATE_STEPS},
            "env": {"n_agents": 8, "density": 0.2}}


RUNS = {
    "estimate-qgnn": _estimate("qgnn", "qgnn"),
    "estimate-qmix": _estimate("local", "qmix"),
    "estimate-vdn": _estimate("local", "vdn"),
    "csg-qgnn": {"experiment": {"name": "csg-qgnn", "env": "csg", "model": "qgnn", "mixer": "qgnn",
                                "seeds": "0", "total_env_steps": CSG_STEPS},
                 "env": {"n_agents": 8, "n_tasks": 3}},
}


def source_digest() -> str:
    h = hashlib.sha256()
    for name in TRAJECTORY_SOURCES:
        h.update((ROOT / "src" / "qgnn" / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


def run_config(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_mapping(RUNS[name])


def run_dir(name: str) -> Path:
    cfg = run_config(name)
    return CACHE / f"{name}-{cfg.hash()}-{source_digest()}"


def cached(name: str) -> bool:
    return (run_dir(name) / "done.json").exists()


def held_out_instances(n: int, m: int, count: int = CSG_HELD_OUT):
    rng = np.random.default_rng(CSG_HELD_OUT_SEED)
    return [CSGInstance.random(n, m, rng) for _ in range(count)]


def csg_held_out_report(run, count: int = CSG_HELD_OUT) -> dict:
    env = run.eval_env
    rows = []
    for inst in held_out_instances(env.spec.n_agents, env.spec.n_actions, count):
        oracle, _ = csg_bruteforce_oracle(inst)
        rows.append({"oracle": oracle, "greedy": greedy_assignment_value(inst),
                     "policy": run.greedy_value_on(inst)})
    return {"instances": rows}


def ensure(name: str, log=print) -> Path:
    """Train (or reuse) the named run and return its output directory."""
    from qgnn.experiment import run_experiment
    out = run_dir(name)
    if cached(name):
        return out
    cfg = run_config(name)
    progress = out / "progress.log"
    out.mkdir(parents=True, exist_ok=True)
    start = time.time()

    def on_row(row):
        with progress.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    result = run_experiment(cfg, out_dir=out, on_row=on_row)
    info = {"seconds": time.time() - start, "summary": result["summary"]}
    if cfg.experiment.env == "csg":
        for seed, run in result["runs"].items():
            (out / f"held_out_seed{seed}.json").write_text(json.dumps(csg_held_out_report(run), indent=1))
    (out / "done.json").write_text(json.dumps(info, indent=2))
    log(f"{name}: finished in {info['seconds'] / 60:.1f} min -> {out}")
    return out


def load_rows(name: str):
    return read_metrics_csv(run_dir(name) / "metrics.csv")


def load_held_out(name: str):
    out = run_dir(name)
    return [json.loads(p.read_text())["instances"] for p in sorted(out.glob("held_out_seed*.json"))]


if __name__ == "__main__":
    for name in sys.argv[1:] or list(RUNS):
        ensure(name)
