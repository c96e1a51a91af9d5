"""Exact and numerical reference solutions used to judge trained policies."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import linprog

from .envs import CSGInstance, csg_global_reward

MAX_ASSIGNMENTS = 10 ** 8


class OracleSizeError(ValueError):
    """The instance is too large for exhaustive enumeration."""


# ----------------------------------------------------------------------------
# Coalition structure generation
# ----------------------------------------------------------------------------

def csg_bruteforce_oracle(instance: CSGInstance, chunk: int = 200_000) -> Tuple[float, Tuple[int, ...]]:
    """Best joint assignment by enumerating all ``m**n`` of them.

    Assignments are visited in lexicographic order and only a strictly
    better value replaces the incumbent, so ties resolve to the
    lexicographically smallest assignment.
    """
    n, m = instance.n, instance.m
    total = m ** n
    if total > MAX_ASSIGNMENTS:
        raise OracleSizeError(f"{m}^{n} = {total} assignments exceeds the limit of {MAX_ASSIGNMENTS}")
    values = instance.reward_matrix
    powers = m ** np.arange(n - 1, -1, -1)
    best_value, best_index = -math.inf, 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        assign = (idx[:, None] // powers) % m                      # [k, n], row-major digits
        score = np.zeros(idx.shape[0])
        for task in range(m):
            member = assign == task
            count = member.sum(axis=1)
            s = member.astype(np.float64) @ values[:, task]
            score += np.where(count > 0, s / np.maximum(count, 1), instance.empty_penalty)
        k = int(np.argmax(score))
        if score[k] > best_value:
            best_value, best_index = float(score[k]), int(idx[k])
    best = tuple(int(d) for d in (best_index // powers) % m)
    # recompute through the reference reward so both agree bit-for-bit
    return csg_global_reward(instance, best), best


def greedy_assignment(instance: CSGInstance) -> np.ndarray:
    return np.argmax(instance.reward_matrix, axis=1)


def greedy_assignment_value(instance: CSGInstance) -> float:
    """Value when each agent independently picks its best task."""
    return csg_global_reward(instance, greedy_assignment(instance))


# ----------------------------------------------------------------------------
# Monotone representability of a 2x2 game
# ----------------------------------------------------------------------------

def _fit_given_orders(payoff: np.ndarray, q0: np.ndarray, q1: np.ndarray) -> float:
    """Min over joint outputs of the max error, s.t. outputs are monotone in (q0, q1).

    Solved as a linear program in (Q00, Q01, Q10, Q11, t).
    """
    cells = [(u, v) for u in range(2) for v in range(2)]
    A_ub, b_ub = [], []
    for k, (u, v) in enumerate(cells):
        for sign in (1.0, -1.0):        # |Q_uv - P_uv| <= t
            row = np.zeros(5)
            row[k], row[4] = sign, -1.0
            A_ub.append(row)
            b_ub.append(sign * payoff[u, v])
    for a, (u, v) in enumerate(cells):
        for b, (u2, v2) in enumerate(cells):
            if a == b:
                continue
            if q0[u] <= q0[u2] and q1[v] <= q1[v2]:   # dominated point: Q_a <= Q_b
                row = np.zeros(5)
                row[a], row[b] = 1.0, -1.0
                A_ub.append(row)
                b_ub.append(0.0)
    res = linprog(np.eye(5)[4], A_ub=np.array(A_ub), b_ub=np.array(b_ub),
                  bounds=[(None, None)] * 4 + [(0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"monotone fit LP failed: {res.message}")
    return float(res.fun)


def monotone_fit_oracle(payoff, restarts: int = 128, seed: int = 0) -> float:
    """Smallest max-abs error any monotone mixture of local q-tables can reach.

    Each restart draws random local q-tables for the two agents; the q-tables
    only matter through the orderings they induce, and for fixed orderings the
    best monotone set of joint outputs is an LP. The minimum over restarts is
    returned.
    """
    payoff = np.asarray(payoff, dtype=np.float64)
    if payoff.shape != (2, 2):
        raise ValueError(f"payoff must be 2x2, got shape {payoff.shape}")
    rng = np.random.default_rng(seed)
    best = math.inf
    for _ in range(max(restarts, 1)):
        q0, q1 = rng.normal(size=2), rng.normal(size=2)
        best = min(best, _fit_given_orders(payoff, q0, q1))
    return max(best, 0.0)


# ----------------------------------------------------------------------------
# Shapley values
# ----------------------------------------------------------------------------

@dataclass
class CoalitionGame:
    """Characteristic function as a table indexed by coalition bitmask.

    Player ``i`` belongs to coalition ``S`` iff bit ``i`` of ``S`` is set.
    """

    n: int
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.n < 1:
            raise ValueError("a game needs at least one player")
        if self.v.shape != (2 ** self.n,):
            raise ValueError(f"value table must list all 2^{self.n} = {2 ** self.n} coalitions, "
                             f"got {self.v.size} entries")
        if not np.all(np.isfinite(self.v)):
            raise ValueError("value table contains missing or non-finite entries")
        if self.v[0] != 0.0:
            raise ValueError("the empty coalition must have value 0")

    @classmethod
    def from_function(cls, n: int, fn) -> "CoalitionGame":
        table = [fn(frozenset(i for i in range(n) if mask >> i & 1)) for mask in range(2 ** n)]
        return cls(n, np.array(table, dtype=np.float64))

    def value(self, members) -> float:
        mask = 0
        for i in members:
            mask |= 1 << int(i)
        return float(self.v[mask])


def shapley_values(game: CoalitionGame) -> np.ndarray:
    """Exact Shapley values by summing weighted marginal contributions."""
    n = game.n
    if n > 20:
        raise OracleSizeError(f"exact Shapley values limited to n <= 20, got {n}")
    masks = np.arange(2 ** n)
    sizes = np.array([bin(s).count("1") for s in range(2 ** n)])
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
                       if k < n else 0.0 for k in range(n + 1)])
    psi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        marginal = game.v[without | (1 << i)] - game.v[without]
        psi[i] = math.fsum(weight[sizes[without]] * marginal)
    return psi


def shapley_values_by_permutation(game: CoalitionGame) -> np.ndarray:
    """Reference implementation averaging marginal contributions over all orderings."""
    n = game.n
    psi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for order in perms:
        mask = 0
        for i in order:
            psi[i] += game.v[mask | (1 << i)] - game.v[mask]
            mask |= 1 << i
    return psi / len(perms)
