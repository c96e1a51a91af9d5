"""Command-line driver: ``qgnn train|eval|oracle|plot|sweep``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .envs import CSGInstance
from .trainer import CheckpointError, NonFiniteLossError

log = logging.getLogger("qgnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "output", None):
        overrides.append(f"experiment.output_dir={args.output}")
    return cfg.with_overrides(overrides) if overrides else cfg.validate()


def _parse_matrix(text: str) -> np.ndarray:
    """``"1,0;0,1"`` -> 2-D array (rows separated by ``;``)."""
    try:
        rows = [[float(v) for v in r.split(",")] for r in text.split(";") if r.strip()]
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"cannot parse matrix {text!r}: {exc}")
    if table.ndim != 2:
        raise ConfigError(f"matrix rows must have equal length: {text!r}")
    return table


def _emit(obj, args):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .experiment import run_experiment
    cfg = _load_config(args)

    def show(row):
        log.info("seed %d  steps %7d  reward %.4f  eps %.3f", row["seed"], row["env_steps"],
                 row["mean_reward"], row["epsilon"])

    result = run_experiment(cfg, resume=args.resume, on_row=show)
    _emit(result["summary"], args)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import Run
    from .metrics import correlation_from_episodes
    cfg = _load_config(args)
    run = Run.from_checkpoint(args.checkpoint, cfg)
    batch = run.greedy_episodes(args.episodes, np.random.default_rng(args.seed))
    out = {"episodes": args.episodes, "env_steps": run.env_steps,
           "mean_reward": float(batch.reward.sum(axis=1).mean())}
    if batch.local_rewards is not None:
        out["corr_local"], out["corr_global"] = correlation_from_episodes(batch)
    _emit(out, args)
    return EXIT_OK


def cmd_oracle_csg(args) -> int:
    from .oracles import csg_bruteforce_oracle, greedy_assignment, greedy_assignment_value
    if args.matrix:
        instance = CSGInstance(_parse_matrix(args.matrix), args.empty_penalty)
    else:
        instance = CSGInstance.random(args.agents, args.tasks, np.random.default_rng(args.seed))
        instance = CSGInstance(instance.reward_matrix, args.empty_penalty)
    value, assignment = csg_bruteforce_oracle(instance)
    _emit({"best_value": value, "best_assignment": list(assignment),
           "greedy_value": greedy_assignment_value(instance),
           "greedy_assignment": greedy_assignment(instance).tolist()}, args)
    return EXIT_OK


def cmd_oracle_monotone(args) -> int:
    from .oracles import monotone_fit_oracle
    payoff = _parse_matrix(args.payoff)
    err = monotone_fit_oracle(payoff, restarts=args.restarts, seed=args.seed)
    _emit({"payoff": payoff.tolist(), "min_max_error": err}, args)
    return EXIT_OK


def cmd_oracle_shapley(args) -> int:
    from .oracles import CoalitionGame, shapley_values
    values = [float(v) for v in args.values.split(",")]
    n = int(np.log2(len(values))) if values else 0
    try:
        game = CoalitionGame(n, np.array(values))
    except ValueError as exc:
        raise ConfigError(str(exc))
    psi = shapley_values(game)
    _emit({"shapley": psi.tolist(), "grand_coalition": float(game.v[-1])}, args)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .experiment import write_plots
    from .metrics import read_metrics_csv
    series = []
    for path in args.csv:
        rows = read_metrics_csv(path)
        by_run = {}
        for r in rows:
            by_run.setdefault(r["run_id"], []).append(r)
        series.extend(by_run.items())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in write_plots(out, series):
        print(p)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import SWEEP_MIXERS, SWEEP_MODELS, run_sweep
    cfg = _load_config(args)
    models = args.models.split(",") if args.models else SWEEP_MODELS
    mixers = args.mixers.split(",") if args.mixers else SWEEP_MIXERS
    _emit(run_sweep(cfg, args.jobs, models, mixers), args)
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("-c", "--config", help="INI experiment config")
        sp.add_argument("-s", "--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
        sp.add_argument("-o", "--output", help="output directory (overrides experiment.output_dir)")

    sp = sub.add_parser("train", help="train every seed of one configuration")
    config_args(sp)
    sp.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    config_args(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--episodes", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    oracle = sub.add_parser("oracle", help="reference solvers").add_subparsers(dest="oracle", required=True)
    sp = oracle.add_parser("csg", help="exhaustive coalition-structure optimum")
    sp.add_argument("--matrix", help="reward matrix, rows separated by ';' (agents x tasks)")
    sp.add_argument("--agents", type=int, default=8)
    sp.add_argument("--tasks", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--empty-penalty", type=float, default=-10.0)
    sp.set_defaults(func=cmd_oracle_csg)
    sp = oracle.add_parser("monotone-fit", help="best max-error of a monotone fit to a 2x2 game")
    sp.add_argument("--payoff", default="1,0;0,1")
    sp.add_argument("--restarts", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_oracle_monotone)
    sp = oracle.add_parser("shapley", help="exact Shapley values")
    sp.add_argument("values", help="comma-separated v(S) for bitmasks S = 0 .. 2^n-1")
    sp.set_defaults(func=cmd_oracle_shapley)

    sp = sub.add_parser("plot", help="SVG learning curves from metrics CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("sweep", help="run the model x mixer grid")
    config_args(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.add_argument("--models", help="comma-separated subset of models")
    sp.add_argument("--mixers", help="comma-separated subset of mixers")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # non-finite loss, oracle guard, bad checkpoint, ...
        from .experiment import RunFailure
        from .oracles import OracleSizeError
        if isinstance(exc, (RunFailure, NonFiniteLossError, OracleSizeError, CheckpointError,
                            ValueError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        raise


if __name__ == "__main__":
    sys.exit(main())
