"""Per-agent q-value models with parameters shared across agents.

Every model encodes each agent's trajectory with a GRU and then maps the
encodings to one q-value per action:

* ``local`` - an MLP head on the agent's own encoding (VDN / QMIX style).
* ``qgnn`` - two EdgeConv layers over the communication graph, then a critic
  on the concatenation of the layer-0 and layer-2 features.
* ``attention`` / ``attention-graph`` - one multi-head attention layer over
  all agents, or only over graph neighbours, then an MLP head.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .graph import Graph
from .layers import MLP, EdgeConv, GRUCell, GraphAttention, graph_mask


class AgentModel(nn.Module):
    def __init__(self, obs_dim: int, n_actions: int, n_agents: int, hidden: int = 64,
                 last_action: bool = True, agent_id: bool = False, activation: str = "elu"):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.hidden = hidden
        self.last_action = last_action
        self.agent_id = agent_id
        self.activation = activation
        self.input_dim = obs_dim + (n_actions if last_action else 0) + (1 if agent_id else 0)
        self.encoder = GRUCell(self.input_dim, hidden)

    def init_hidden(self, *batch_shape: int) -> Tensor:
        dtype = self.encoder.weight_ih.dtype
        return torch.zeros(*batch_shape, self.n_agents, self.hidden, dtype=dtype)

    def build_inputs(self, obs: Tensor, prev_actions: Tensor) -> Tensor:
        if obs.shape[-2:] != (self.n_agents, self.obs_dim):
            raise ValueError(f"observations must end in ({self.n_agents}, {self.obs_dim}), got {tuple(obs.shape)}")
        parts = [obs]
        if self.last_action:
            if prev_actions.shape[-1] != self.n_actions:
                raise ValueError(f"previous actions must be one-hot of width {self.n_actions}")
            parts.append(prev_actions.to(obs.dtype))
        if self.agent_id:
            ids = torch.arange(self.n_agents, dtype=obs.dtype) / max(self.n_agents - 1, 1)
            parts.append(ids.expand(*obs.shape[:-1]).unsqueeze(-1))
        return torch.cat(parts, dim=-1)

    def encode_step(self, obs: Tensor, prev_actions: Tensor, hidden: Tensor) -> Tensor:
        return self.encoder(self.build_inputs(obs, prev_actions), hidden)

    def q_values(self, enc: Tensor, mask: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, obs: Tensor, prev_actions: Tensor, hidden: Tensor, mask: Tensor):
        """One timestep: returns ``(q [..., n, A], new hidden)``."""
        h = self.encode_step(obs, prev_actions, hidden)
        return self.q_values(h, mask), h

    def unroll(self, obs: Tensor, actions: Tensor, mask: Tensor) -> Tensor:
        """q-values for every step of a batch of episodes.

        ``obs`` is ``[B, T, n, obs_dim]``, ``actions`` ``[B, T, n]`` (the
        actions taken, used as the next step's previous action) and ``mask``
        ``[B, n, n]``. Returns ``[B, T, n, A]``.
        """
        B, T = obs.shape[:2]
        h = self.init_hidden(B)
        prev = torch.zeros(B, self.n_agents, self.n_actions, dtype=obs.dtype)
        out = []
        for t in range(T):
            q, h = self(obs[:, t], prev, h, mask)
            out.append(q)
            prev = F.one_hot(actions[:, t], self.n_actions).to(obs.dtype)
        return torch.stack(out, dim=1)


class LocalModel(AgentModel):
    def __init__(self, obs_dim, n_actions, n_agents, hidden=64, **kw):
        super().__init__(obs_dim, n_actions, n_agents, hidden, **kw)
        self.head = MLP([hidden, hidden, n_actions], self.activation)

    def q_values(self, enc, mask=None):
        return self.head(enc)


class QGNNModel(AgentModel):
    def __init__(self, obs_dim, n_actions, n_agents, hidden=64, **kw):
        super().__init__(obs_dim, n_actions, n_agents, hidden, **kw)
        self.conv1 = EdgeConv(hidden, (hidden,), hidden, self.activation)
        self.conv2 = EdgeConv(hidden, (hidden,), hidden, self.activation)
        self.critic = MLP([2 * hidden, hidden, n_actions], self.activation)

    def q_values(self, enc, mask):
        x1 = self.conv1(enc, mask)
        x2 = self.conv2(x1, mask)
        return self.critic(torch.cat([enc, x2], dim=-1))


class AttentionModel(AgentModel):
    def __init__(self, obs_dim, n_actions, n_agents, hidden=64, masked: bool = False,
                 n_heads: int = 4, head_dim: int = 16, **kw):
        super().__init__(obs_dim, n_actions, n_agents, hidden, **kw)
        self.masked = masked
        self.attention = GraphAttention(hidden, n_heads, head_dim)
        self.head = MLP([2 * hidden, hidden, n_actions], self.activation)

    def q_values(self, enc, mask):
        ctx = self.attention(enc, mask if self.masked else None)
        return self.head(torch.cat([enc, ctx], dim=-1))


MODELS = ("local", "qgnn", "attention", "attention-graph")


def make_model(kind: str, obs_dim: int, n_actions: int, n_agents: int, hidden: int = 64,
               **kw) -> AgentModel:
    if kind == "local":
        return LocalModel(obs_dim, n_actions, n_agents, hidden, **kw)
    if kind == "qgnn":
        return QGNNModel(obs_dim, n_actions, n_agents, hidden, **kw)
    if kind in ("attention", "attention-graph"):
        return AttentionModel(obs_dim, n_actions, n_agents, hidden,
                              masked=kind == "attention-graph", **kw)
    raise ValueError(f"unknown model {kind!r}; choose from {MODELS}")


# ----------------------------------------------------------------------------
# Graph-level convenience wrappers and action selection
# ----------------------------------------------------------------------------

def qgnn_q_values(model: QGNNModel, enc: Tensor, graph: Graph) -> Tensor:
    if graph.n != model.n_agents:
        raise ValueError(f"graph has {graph.n} nodes, model expects {model.n_agents}")
    return model.q_values(enc, graph_mask(graph))


def local_q_values(model: LocalModel, enc: Tensor) -> Tensor:
    return model.q_values(enc)


def attention_q_values(model: AttentionModel, enc: Tensor, graph: Graph, masked: bool) -> Tensor:
    if graph.n != model.n_agents:
        raise ValueError(f"graph has {graph.n} nodes, model expects {model.n_agents}")
    ctx = model.attention(enc, graph_mask(graph) if masked else None)
    return model.head(torch.cat([enc, ctx], dim=-1))


def select_actions(q, epsilon: float, rng: np.random.Generator,
                   avail: Optional[np.ndarray] = None) -> np.ndarray:
    """Epsilon-greedy choice per agent; greedy ties go to the lowest index.

    Two uniform draws per agent are consumed whatever ``epsilon`` is, so the
    random stream advances identically for greedy and exploring calls.
    """
    q = np.asarray(q.detach().cpu() if isinstance(q, Tensor) else q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"q must be [n_agents, n_actions], got shape {q.shape}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if avail is None:
        avail = np.ones(q.shape, dtype=bool)
    avail = np.asarray(avail, dtype=bool)
    if avail.shape != q.shape:
        raise ValueError("avail mask shape must match q")
    counts = avail.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("every agent needs at least one available action")
    greedy = np.where(avail, q, -np.inf).argmax(axis=1)
    explore = rng.random(q.shape[0]) < epsilon
    pick = np.minimum((rng.random(q.shape[0]) * counts).astype(np.int64), counts - 1)
    random_actions = np.array([np.flatnonzero(row)[k] for row, k in zip(avail, pick)])
    return np.where(explore, random_actions, greedy).astype(np.int64)
