"""Monotone mixers: chosen-action local q-values -> global Q.

Each mixer maps ``q [..., n]`` (and optionally ``state [..., state_dim]``) to
``Q [...]`` with ``dQ/dq_i >= 0`` by construction.
"""
from __future__ import annotations

from typing import Optional

import torch
from torch import Tensor, nn

from .layers import MLP, GeneralizedAggregation, HyperNet, Linear, get_activation, positive_map


class Mixer(nn.Module):
    needs_state = False

    def forward(self, q: Tensor, state: Optional[Tensor] = None) -> Tensor:
        raise NotImplementedError


class VDNMixer(Mixer):
    def forward(self, q, state=None):
        return q.sum(dim=-1)


class QMixer(Mixer):
    """Two-layer mixing network whose weights come from hypernetworks on the state."""

    needs_state = True

    def __init__(self, n_agents: int, state_dim: int, embed: int = 32, hypernet_hidden: int = 64,
                 activation: str = "elu"):
        super().__init__()
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.act = get_activation(activation)
        self.hyper_w1 = HyperNet(state_dim, (n_agents, embed), hypernet_hidden, positive=True)
        self.hyper_b1 = HyperNet(state_dim, (embed,))
        self.hyper_w2 = HyperNet(state_dim, (embed, 1), hypernet_hidden, positive=True)
        self.value = MLP([state_dim, embed, 1], activation)

    def forward(self, q, state=None):
        if state is None:
            raise ValueError("QMixer needs the global state")
        if q.shape[-1] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} agent values, got {q.shape[-1]}")
        w1 = self.hyper_w1(state)                                  # [..., n, E]
        b1 = self.hyper_b1(state)                                  # [..., E]
        hidden = self.act((q.unsqueeze(-2) @ w1).squeeze(-2) + b1)
        w2 = self.hyper_w2(state)                                  # [..., E, 1]
        out = (hidden.unsqueeze(-2) @ w2).squeeze(-2) + self.value(state)
        return out.squeeze(-1)


class QGNNMixer(Mixer):
    """Deep-sets style pooling: outer( aggregate_i inner(q_i) ).

    ``inner`` is a positive-weight scalar-to-vector map followed by a strictly
    positive activation, the aggregation is :class:`GeneralizedAggregation`
    applied per feature across agents, and ``outer`` is a positive-weight MLP.
    The parameter count does not depend on the number of agents.
    """

    def __init__(self, width: int = 12, outer_hidden: int = 12, activation: str = "elu"):
        super().__init__()
        self.inner = Linear(1, width, positive=True)
        self.aggregate = GeneralizedAggregation()
        self.outer = MLP([width, outer_hidden, 1], activation, positive=True)

    def inner_features(self, q: Tensor) -> Tensor:
        # elementwise form of the 1 -> width layer: each agent's row is
        # computed independently of the other agents
        w = self.inner.effective_weight().squeeze(-1)
        return positive_map(q.unsqueeze(-1) * w + self.inner.bias)

    def forward(self, q, state=None):
        # sorting first keeps the elementwise kernels' results independent of
        # where a value sits in memory, so the output is bit-exactly symmetric
        q = torch.sort(q, dim=-1).values
        pooled = self.aggregate(self.inner_features(q), dim=-2)
        return self.outer(pooled).squeeze(-1)

    def num_mixing_parameters(self) -> int:
        """Matrix and bias entries of the inner and outer networks (rho, alpha excluded)."""
        return sum(p.numel() for name, p in self.named_parameters() if not name.startswith("aggregate."))


MIXERS = ("vdn", "qmix", "qgnn")


def make_mixer(kind: str, n_agents: int, state_dim: int, **kw) -> Mixer:
    if kind == "vdn":
        return VDNMixer()
    if kind == "qmix":
        return QMixer(n_agents, state_dim, **kw)
    if kind == "qgnn":
        return QGNNMixer(**kw)
    raise ValueError(f"unknown mixer {kind!r}; choose from {MIXERS}")


def vdn_mix(q: Tensor) -> Tensor:
    return q.sum(dim=-1)


def qmix_mix(params: QMixer, q: Tensor, state: Optional[Tensor]) -> Tensor:
    return params(q, state)


def qgnn_mix(params: QGNNMixer, q: Tensor) -> Tensor:
    return params(q)
