import numpy as np
import pytest
import torch

from qgnn.envs import EstimateGame, MatrixGame
from qgnn.agents import make_model
from qgnn.metrics import (UndefinedCorrelation, aggregate_curve, collect_correlation,
                          correlation_from_episodes, final_mean, max_of_mean, pearson_correlation,
                          read_metrics_csv, write_metrics_csv)
from qgnn.trainer import rollout_episode, EpisodeBatch


def test_pearson_examples():
    assert pearson_correlation([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson_correlation([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    # centred: (-1, 0, 1) and (-7/3, -1/3, 8/3); r = 5 / sqrt(2 * 114/9)
    assert pearson_correlation([1, 2, 3], [2, 4, 7]) == pytest.approx(5 / np.sqrt(2 * 114 / 9), abs=1e-12)
    assert pearson_correlation([1, 2, 3], [2, 4, 7]) == pytest.approx(0.99340, abs=1e-5)
    assert pearson_correlation([1, 2, 3], [2, 4, 7]) == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 7])[0, 1])


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelation):
        pearson_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_correlation([1], [1])
    with pytest.raises(ValueError):
        pearson_correlation([1, 2], [1, 2, 3])


def test_untrained_model_is_uncorrelated(rng):
    env = EstimateGame(8, 0.2)
    model = make_model("qgnn", 1, 10, 8)
    corr_local, _ = collect_correlation(model, env, 700, rng)   # 5600 samples
    assert abs(corr_local) < 0.2


def test_perfect_predictor_has_unit_correlation(rng):
    env = EstimateGame(8, 0.2)
    model = make_model("local", 1, 10, 8)
    batch = EpisodeBatch.concat([rollout_episode(env, model, 1.0, rng) for _ in range(50)])
    batch.q_taken = batch.local_rewards.copy()
    assert correlation_from_episodes(batch)[0] == pytest.approx(1.0)


def test_correlation_needs_local_rewards(rng):
    with pytest.raises(ValueError):
        collect_correlation(make_model("local", 1, 2, 2), MatrixGame(), 4, rng)


ROWS = [
    {"run_id": "r", "seed": 0, "env_steps": 10, "mean_reward": 1.0, "loss": None, "epsilon": 0.5,
     "corr_local": None, "corr_global": None},
    {"run_id": "r", "seed": 0, "env_steps": 20, "mean_reward": 3.0, "loss": 0.25, "epsilon": 0.25,
     "corr_local": 0.5, "corr_global": None},
    {"run_id": "r", "seed": 1, "env_steps": 10, "mean_reward": 2.0, "loss": None, "epsilon": 0.5,
     "corr_local": None, "corr_global": None},
    {"run_id": "r", "seed": 1, "env_steps": 20, "mean_reward": 0.0, "loss": 0.5, "epsilon": 0.25,
     "corr_local": 0.7, "corr_global": None},
]


def test_csv_roundtrip(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", ROWS)
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "# schema: qgnn-metrics/1"
    assert text[1] == "run_id,seed,env_steps,mean_reward,loss,epsilon,corr_local,corr_global"
    assert read_metrics_csv(tmp_path / "m.csv") == ROWS


def test_csv_schema_checked(tmp_path):
    (tmp_path / "m.csv").write_text("# schema: qgnn-metrics/0\nrun_id\n")
    with pytest.raises(ValueError):
        read_metrics_csv(tmp_path / "m.csv")


def test_max_of_mean_convention():
    # means across seeds: step 10 -> 1.5, step 20 -> 1.5 ; per-seed maxima would give 3.0 and 2.0
    steps, mean, lo, hi = aggregate_curve(ROWS, "mean_reward")
    assert steps.tolist() == [10, 20] and mean.tolist() == [1.5, 1.5]
    assert lo.tolist() == [1.0, 0.0] and hi.tolist() == [2.0, 3.0]
    assert max_of_mean(ROWS, "mean_reward") == 1.5
    assert max_of_mean(ROWS, "corr_local") == pytest.approx(0.6)
    assert final_mean(ROWS, "mean_reward") == 1.5
    assert max_of_mean(ROWS, "corr_global") is None
