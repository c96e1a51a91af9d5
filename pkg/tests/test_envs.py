import numpy as np
import pytest

from qgnn.envs import (CoalitionEnv, CSGInstance, EstimateGame, MatrixGame, csg_coalition_value,
                       csg_global_reward, csg_global_reward_batch, estimate_hidden_state,
                       estimate_local_reward, make_env)
from qgnn.graph import Graph, build_empty, build_fully_connected


# -- Estimate Game -------------------------------------------------------------

def test_hidden_state_isolated_agent():
    # own term only: 2 * 0.3 * (x - 0.5) + 0.5
    y = estimate_hidden_state([0.9, 0.1], build_empty(2))
    assert y == pytest.approx([0.74, 0.26])


def test_hidden_state_pair():
    # agent 0: 2*(0.3*0.4 + 0.7*(-0.4)) + 0.5 = 0.18 ; agent 1: 2*(0.3*-0.4 + 0.7*0.4) + 0.5 = 0.82
    y = estimate_hidden_state([0.9, 0.1], build_fully_connected(2))
    assert y == pytest.approx([0.18, 0.82])


def test_hidden_state_neighbour_mean_and_clip():
    g = Graph(3, ((0, 1), (0, 2)))
    y = estimate_hidden_state([1.0, 1.0, 1.0], g)
    assert np.all(y == 1.0)          # 2 * 0.5 + 0.5 = 1.5 clipped
    y = estimate_hidden_state([0.5, 1.0, 0.0], g)
    assert y[0] == pytest.approx(0.5)  # neighbours average to zero offset


def test_local_reward_inside_and_outside_interval():
    assert estimate_local_reward(0.55, 5) == 0.0
    assert estimate_local_reward(0.55, 3) == pytest.approx(-0.15)
    assert estimate_local_reward(0.55, 7) == pytest.approx(-0.15)
    assert estimate_local_reward(1.0, 9) == 0.0
    with pytest.raises(ValueError):
        estimate_local_reward(0.5, 10)


def test_estimate_game_step(rng):
    env = EstimateGame(8, 0.2)
    obs = env.reset(rng)
    assert obs.shape == (8, 1)
    correct = np.minimum((env.y * 10).astype(int), 9)
    res = env.step(correct)
    assert res.done
    assert np.all(res.local_rewards == 0.0) and res.global_reward == 0.0
    env.reset(rng)
    wrong = (np.minimum((env.y * 10).astype(int), 9) + 5) % 10
    res = env.step(wrong)
    assert res.global_reward == pytest.approx(res.local_rewards.min())
    assert res.global_reward < 0


def test_estimate_game_rejects_bad_actions(rng):
    env = EstimateGame(4)
    env.reset(rng)
    with pytest.raises(ValueError):
        env.step([0, 1, 2])
    with pytest.raises(ValueError):
        env.step([0, 1, 2, 10])


def test_step_after_done_and_before_reset(rng):
    env = EstimateGame(3)
    with pytest.raises(RuntimeError):
        env.step([0, 0, 0])
    env.reset(rng)
    env.step([0, 0, 0])
    with pytest.raises(RuntimeError):
        env.step([0, 0, 0])


def test_estimate_reset_is_seed_deterministic():
    a, b = EstimateGame(8), EstimateGame(8)
    oa, ob = a.reset(np.random.default_rng(3)), b.reset(np.random.default_rng(3))
    assert np.array_equal(oa, ob) and a.graph == b.graph


# -- Coalition structure generation --------------------------------------------

def test_csg_values_by_hand():
    inst = CSGInstance(np.array([[1.0, 0.1], [0.1, 1.0]]))
    assert csg_global_reward(inst, [0, 1]) == pytest.approx(2.0)
    assert csg_global_reward(inst, [0, 0]) == pytest.approx(0.55 - 10)
    assert csg_coalition_value(inst, [], 1) == -10
    assert csg_coalition_value(inst, [0, 1], 0) == pytest.approx(0.55)
    with pytest.raises(ValueError):
        csg_global_reward(inst, [0, 2])


def test_csg_batch_matches_scalar(rng):
    inst = CSGInstance.random(6, 3, rng)
    joint = rng.integers(0, 3, size=(50, 6))
    expected = [csg_global_reward(inst, j) for j in joint]
    assert np.allclose(csg_global_reward_batch(inst, joint), expected)


def test_coalition_env_observation_and_reward(rng):
    env = CoalitionEnv(8, 3)
    obs = env.reset(rng)
    assert obs.shape == (8, 4)
    assert np.allclose(obs[:, :3], env.instance.reward_matrix)
    assert np.allclose(obs[:, 3], np.arange(8) / 7)
    assert env.graph.num_edges == 28
    actions = rng.integers(0, 3, 8)
    res = env.step(actions)
    assert res.global_reward == pytest.approx(csg_global_reward(env.instance, actions))
    assert res.local_rewards is None


# -- Matrix game ---------------------------------------------------------------

def test_matrix_game_payoff(rng):
    env = MatrixGame()
    for a, b, r in [(0, 0, 1.0), (0, 1, 0.0), (1, 0, 0.0), (1, 1, 1.0)]:
        obs = env.reset(rng)
        assert np.all(obs == 0)
        assert env.step([a, b]).global_reward == r


def test_make_env():
    assert isinstance(make_env("matrix"), MatrixGame)
    assert make_env("csg", n_agents=4, n_tasks=2).spec.n_actions == 2
    with pytest.raises(ValueError):
        make_env("starcraft")
