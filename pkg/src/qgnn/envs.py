"""Cooperative multi-agent environments with a shared global reward.

Three environments live here:

* :class:`EstimateGame` - agents guess a hidden value that mixes their own
  state with their neighbours' states. Ground-truth local rewards are exposed
  for diagnostics only.
* :class:`CoalitionEnv` - coalition structure generation: each agent picks a
  task, the global reward is the sum of coalition values.
* :class:`MatrixGame` - a stateless two-player coordination game.

All environments expose ``spec``, ``graph``, ``reset(rng)`` and
``step(actions)``. Randomness is drawn only from the generator passed to
``reset``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, build_fully_connected, build_random_density

EMPTY_COALITION_PENALTY = -10.0
N_INTERVALS = 10


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    episode_limit: int

    def __post_init__(self):
        for name in ("n_agents", "n_actions", "obs_dim", "episode_limit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def state_dim(self) -> int:
        return self.n_agents * self.obs_dim


@dataclass
class StepResult:
    observations: np.ndarray
    global_reward: float
    local_rewards: Optional[np.ndarray]
    done: bool


class MultiAgentEnv:
    """Base class: subclasses implement ``_reset`` and ``_rewards``."""

    spec: EnvSpec
    has_local_rewards = False

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.graph: Graph = build_fully_connected(spec.n_agents)
        self._t = 0
        self._obs: Optional[np.ndarray] = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._t = 0
        self._obs = self._reset(rng)
        return self._obs.copy()

    def step(self, actions: Sequence[int]) -> StepResult:
        if self._obs is None:
            raise RuntimeError("step() called before reset()")
        if self._t >= self.spec.episode_limit:
            raise RuntimeError("episode already finished; call reset()")
        actions = self._check_actions(actions)
        global_reward, local = self._rewards(actions)
        self._t += 1
        done = self._t >= self.spec.episode_limit
        return StepResult(self._obs.copy(), float(global_reward), local, done)

    def _check_actions(self, actions) -> np.ndarray:
        actions = np.asarray(actions)
        if actions.shape != (self.spec.n_agents,):
            raise ValueError(f"expected {self.spec.n_agents} actions, got shape {actions.shape}")
        if not np.issubdtype(actions.dtype, np.integer):
            raise ValueError("actions must be integers")
        if (actions < 0).any() or (actions >= self.spec.n_actions).any():
            raise ValueError(f"action out of range [0, {self.spec.n_actions}): {actions.tolist()}")
        return actions.astype(np.int64)

    def avail_actions(self) -> np.ndarray:
        return np.ones((self.spec.n_agents, self.spec.n_actions), dtype=bool)

    def _reset(self, rng):
        raise NotImplementedError

    def _rewards(self, actions):
        raise NotImplementedError


# ----------------------------------------------------------------------------
# Estimate Game
# ----------------------------------------------------------------------------

def estimate_hidden_state(x, graph: Graph) -> np.ndarray:
    """Hidden value per agent from its own state and the mean of its neighbours'.

    Neighbours exclude the agent itself; an isolated agent contributes a zero
    neighbour term. The result is clamped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (graph.n,):
        raise ValueError(f"x must have shape ({graph.n},), got {x.shape}")
    adj = graph.adjacency(include_self=False).astype(np.float64)
    deg = adj.sum(axis=1)
    centred = x - 0.5
    nbr_sum = adj @ centred
    nbr_mean = np.divide(nbr_sum, deg, out=np.zeros_like(nbr_sum), where=deg > 0)
    y = 2.0 * (0.3 * centred + 0.7 * nbr_mean) + 0.5
    return np.clip(y, 0.0, 1.0)


def interval_bounds(action: int, n_intervals: int = N_INTERVALS):
    return action / n_intervals, (action + 1) / n_intervals


def estimate_local_reward(y, action, n_intervals: int = N_INTERVALS):
    """Minus the distance from ``y`` to the guessed interval (0 inside it)."""
    action = np.asarray(action)
    if (action < 0).any() or (action >= n_intervals).any():
        raise ValueError(f"action out of range [0, {n_intervals})")
    lo, hi = interval_bounds(action, n_intervals)
    y = np.asarray(y, dtype=np.float64)
    dist = np.maximum(np.maximum(lo - y, y - hi), 0.0)
    out = -dist
    return float(out) if out.ndim == 0 else out


class EstimateGame(MultiAgentEnv):
    """Each agent observes its scalar state and guesses which tenth of [0, 1]
    its hidden value falls into. The global reward is the worst local reward.

    A fresh state vector and a fresh random graph are drawn at every reset.
    """

    has_local_rewards = True

    def __init__(self, n_agents: int = 8, density: float = 0.2, episode_limit: int = 1):
        if not 0.0 <= density <= 1.0:
            raise ValueError(f"density must lie in [0, 1], got {density}")
        super().__init__(EnvSpec(n_agents, N_INTERVALS, 1, episode_limit))
        self.density = density
        self.x = np.full(n_agents, 0.5)
        self.y = np.full(n_agents, 0.5)

    def _reset(self, rng):
        self.x = rng.random(self.spec.n_agents)
        self.graph = build_random_density(self.spec.n_agents, self.density, rng)
        self.y = estimate_hidden_state(self.x, self.graph)
        return self.x[:, None].astype(np.float32)

    def _rewards(self, actions):
        local = estimate_local_reward(self.y, actions)
        return float(local.min()), local


# ----------------------------------------------------------------------------
# Coalition structure generation
# ----------------------------------------------------------------------------

@dataclass
class CSGInstance:
    reward_matrix: np.ndarray
    empty_penalty: float = EMPTY_COALITION_PENALTY

    def __post_init__(self):
        self.reward_matrix = np.asarray(self.reward_matrix, dtype=np.float64)
        if self.reward_matrix.ndim != 2:
            raise ValueError("reward_matrix must be 2-D (agents x tasks)")

    @property
    def n(self) -> int:
        return self.reward_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.reward_matrix.shape[1]

    @classmethod
    def random(cls, n: int, m: int, rng: np.random.Generator, shape: float = 2.0,
               scale: float = 1.0, empty_penalty: float = EMPTY_COALITION_PENALTY):
        return cls(rng.gamma(shape, scale, size=(n, m)), empty_penalty)


def csg_coalition_value(instance: CSGInstance, members, task: int) -> float:
    if not 0 <= task < instance.m:
        raise ValueError(f"task {task} out of range [0, {instance.m})")
    members = sorted(set(int(i) for i in members))
    if not members:
        return float(instance.empty_penalty)
    if members[0] < 0 or members[-1] >= instance.n:
        raise ValueError("coalition member out of range")
    return float(instance.reward_matrix[members, task].mean())


def csg_global_reward(instance: CSGInstance, joint_action) -> float:
    joint_action = np.asarray(joint_action)
    if joint_action.shape != (instance.n,):
        raise ValueError(f"expected {instance.n} task choices, got shape {joint_action.shape}")
    if (joint_action < 0).any() or (joint_action >= instance.m).any():
        raise ValueError("task choice out of range")
    return float(sum(
        csg_coalition_value(instance, np.flatnonzero(joint_action == task), task)
        for task in range(instance.m)
    ))


def csg_global_reward_batch(instance: CSGInstance, joint_actions: np.ndarray) -> np.ndarray:
    """Vectorised :func:`csg_global_reward` over rows of ``joint_actions``."""
    joint_actions = np.asarray(joint_actions)
    values = instance.reward_matrix
    total = np.zeros(joint_actions.shape[0])
    for task in range(instance.m):
        member = joint_actions == task
        count = member.sum(axis=1)
        s = (member * values[:, task]).sum(axis=1)
        total += np.where(count > 0, s / np.maximum(count, 1), instance.empty_penalty)
    return total


class CoalitionEnv(MultiAgentEnv):
    """Agents choose tasks; coalitions are the sets of agents sharing a task.

    Agent ``i`` observes row ``i`` of the reward matrix followed by its
    normalised index ``i / (n - 1)``. The communication graph is complete.
    """

    def __init__(self, n_agents: int = 16, n_tasks: int = 4, episode_limit: int = 1,
                 gamma_shape: float = 2.0, gamma_scale: float = 1.0,
                 empty_penalty: float = EMPTY_COALITION_PENALTY):
        super().__init__(EnvSpec(n_agents, n_tasks, n_tasks + 1, episode_limit))
        self.gamma_shape = gamma_shape
        self.gamma_scale = gamma_scale
        self.empty_penalty = empty_penalty
        self.instance: Optional[CSGInstance] = None

    def _reset(self, rng):
        n, m = self.spec.n_agents, self.spec.n_actions
        self.instance = CSGInstance.random(n, m, rng, self.gamma_shape, self.gamma_scale,
                                           self.empty_penalty)
        return self.observe(self.instance)

    def observe(self, instance: CSGInstance) -> np.ndarray:
        n = instance.n
        ids = np.arange(n, dtype=np.float64) / max(n - 1, 1)
        return np.concatenate([instance.reward_matrix, ids[:, None]], axis=1).astype(np.float32)

    def set_instance(self, instance: CSGInstance) -> np.ndarray:
        """Start an episode on a given instance instead of a random one."""
        if instance.reward_matrix.shape != (self.spec.n_agents, self.spec.n_actions):
            raise ValueError("instance shape does not match the environment")
        self.instance = instance
        self._t = 0
        self._obs = self.observe(instance)
        return self._obs.copy()

    def _rewards(self, actions):
        return csg_global_reward(self.instance, actions), None


# ----------------------------------------------------------------------------
# Matrix game
# ----------------------------------------------------------------------------

COORDINATION_PAYOFF = np.array([[1.0, 0.0], [0.0, 1.0]])


class MatrixGame(MultiAgentEnv):
    """Stateless two-player game; both agents always observe a zero vector."""

    def __init__(self, payoff=COORDINATION_PAYOFF, episode_limit: int = 1):
        payoff = np.asarray(payoff, dtype=np.float64)
        if payoff.ndim != 2:
            raise ValueError("payoff must be a 2-D table")
        if payoff.shape[0] != payoff.shape[1]:
            raise ValueError("both players must have the same number of actions")
        super().__init__(EnvSpec(2, payoff.shape[0], 1, episode_limit))
        self.payoff = payoff

    def _reset(self, rng):
        return np.zeros((2, 1), dtype=np.float32)

    def _rewards(self, actions):
        return float(self.payoff[actions[0], actions[1]]), None


ENVIRONMENTS = {
    "estimate": EstimateGame,
    "csg": CoalitionEnv,
    "matrix": MatrixGame,
}


def make_env(name: str, **kwargs) -> MultiAgentEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return cls(**kwargs)
