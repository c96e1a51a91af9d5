"""Differentiable building blocks shared by agent models and mixers.

Everything is a ``torch.nn.Module`` (or a pure function over tensors), so the
backward pass comes from autograd. :func:`grad_check` compares those
gradients with central finite differences at 64-bit precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .graph import Graph

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "elu": F.elu,
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
}

P_MIN = 1e-3          # smallest |p| allowed in generalised aggregation
RHO_LIMIT = 1 - 1e-6  # keeps tan(pi*rho/2) finite and correctly signed
POSITIVE_FLOOR = 1e-6


def get_activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


def positive_map(x: Tensor) -> Tensor:
    """Smooth, strictly positive, monotone map used ahead of generalised aggregation."""
    return F.softplus(x) + POSITIVE_FLOOR


class Linear(nn.Module):
    """Affine layer; with ``positive=True`` the effective weight is ``|weight|``."""

    def __init__(self, in_features: int, out_features: int, positive: bool = False, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.positive = positive
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.in_features)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def effective_weight(self) -> Tensor:
        return self.weight.abs() if self.positive else self.weight

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected input width {self.in_features}, got {x.shape[-1]}")
        return F.linear(x, self.effective_weight(), self.bias)

    def extra_repr(self):
        return f"{self.in_features}, {self.out_features}, positive={self.positive}"


class MLP(nn.Module):
    """Alternating affine maps and an elementwise activation.

    The last layer is linear unless ``final_activation`` is given.
    """

    def __init__(self, sizes: Sequence[int], activation: str = "elu", positive: bool = False,
                 final_activation: Optional[Callable[[Tensor], Tensor]] = None):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.activation_name = activation
        self.act = get_activation(activation)
        self.final_activation = final_activation
        self.layers = nn.ModuleList(
            Linear(a, b, positive=positive) for a, b in zip(sizes[:-1], sizes[1:])
        )

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def forward(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = self.act(x)
        if self.final_activation is not None:
            x = self.final_activation(x)
        return x


def mlp_forward(params: MLP, x: Tensor) -> Tensor:
    return params(x)


class GRUCell(nn.Module):
    """Gated recurrent unit.

    r = sig(W_ir x + W_hr h + b_r)
    z = sig(W_iz x + W_hz h + b_z)
    c = tanh(W_ic x + b_ic + r * (W_hc h + b_hc))
    h' = (1 - z) * h + z * c
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight_ih = nn.Parameter(torch.empty(3 * hidden_size, input_size))
        self.weight_hh = nn.Parameter(torch.empty(3 * hidden_size, hidden_size))
        self.bias_ih = nn.Parameter(torch.empty(3 * hidden_size))
        self.bias_hh = nn.Parameter(torch.empty(3 * hidden_size))
        bound = 1.0 / math.sqrt(hidden_size)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.input_size:
            raise ValueError(f"expected input width {self.input_size}, got {x.shape[-1]}")
        if h.shape[-1] != self.hidden_size:
            raise ValueError(f"expected hidden width {self.hidden_size}, got {h.shape[-1]}")
        gi = F.linear(x, self.weight_ih, self.bias_ih)
        gh = F.linear(h, self.weight_hh, self.bias_hh)
        i_r, i_z, i_c = gi.chunk(3, dim=-1)
        h_r, h_z, h_c = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        c = torch.tanh(i_c + r * h_c)
        return (1 - z) * h + z * c


def gru_step(params: GRUCell, x: Tensor, h: Tensor) -> Tensor:
    return params(x, h)


class EdgeConv(nn.Module):
    """Sum-aggregated edge convolution: out_i = sum_{j in N_i} f(x_i || x_j - x_i).

    ``mask[..., i, j]`` marks j as a neighbour of i and is expected to include
    the diagonal. The first affine layer of ``f`` is split into a node term
    and a neighbour term, and the final (linear) layer is applied after
    summing, so no per-edge tensor of width ``2 * in_dim`` is ever built.
    The result equals the per-edge definition exactly in real arithmetic.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int] = (64,), out_dim: int = 64,
                 activation: str = "elu"):
        super().__init__()
        self.in_dim = in_dim
        self.f_edge = MLP([2 * in_dim, *hidden, out_dim], activation)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        n, d = x.shape[-2], x.shape[-1]
        if d != self.in_dim:
            raise ValueError(f"expected feature width {self.in_dim}, got {d}")
        if mask.shape[-2:] != (n, n):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {n} nodes")
        layers = self.f_edge.layers
        first = layers[0]
        w = first.effective_weight()
        w_self, w_diff = w[:, :d], w[:, d:]
        lead = torch.broadcast_shapes(x.shape[:-2], mask.shape[:-2])
        x = x.expand(*lead, n, d).reshape(-1, n, d)
        mask = mask.expand(*lead, n, n).reshape(-1, n, n)
        node_term = F.linear(x, w_self - w_diff, first.bias).reshape(-1, w.shape[0])
        nbr_term = F.linear(x, w_diff).reshape(-1, w.shape[0])
        # edges in (graph, i, j) lexicographic order: sums run over ascending j
        b, i, j = mask.nonzero(as_tuple=True)
        dst = b * n + i
        hid = node_term[dst] + nbr_term[b * n + j]
        if len(layers) > 1:
            hid = self.f_edge.act(hid)
            for layer in layers[1:-1]:
                hid = self.f_edge.act(layer(hid))
        summed = torch.zeros(x.shape[0] * n, hid.shape[-1], dtype=x.dtype).index_add_(0, dst, hid)
        if len(layers) == 1:
            out = summed
        else:
            last = layers[-1]
            out = F.linear(summed, last.effective_weight())
            if last.bias is not None:
                deg = mask.to(x.dtype).sum(dim=-1).reshape(-1, 1)
                out = out + deg * last.bias
        return out.reshape(*lead, n, -1)


def graph_mask(graph: Graph, include_self: bool = True, dtype=torch.bool) -> Tensor:
    return torch.as_tensor(graph.adjacency(include_self)).to(dtype)


def edgeconv_forward(f_edge: EdgeConv, features: Tensor, graph: Graph) -> Tensor:
    if features.shape[-2] != graph.n:
        raise ValueError(f"graph has {graph.n} nodes but features have {features.shape[-2]}")
    return f_edge(features, graph_mask(graph))


class GraphAttention(nn.Module):
    """Multi-head scaled dot-product self-attention over nodes.

    With ``mask=None`` every node attends to every node; otherwise node i
    attends to the j with ``mask[..., i, j]`` set (the diagonal must be set).
    """

    def __init__(self, dim: int, n_heads: int = 4, head_dim: int = 16, out_dim: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        inner = n_heads * head_dim
        self.query = Linear(dim, inner, bias=False)
        self.key = Linear(dim, inner, bias=False)
        self.value = Linear(dim, inner, bias=False)
        self.out = Linear(inner, out_dim or dim)
        self.last_weights: Optional[Tensor] = None

    def _split(self, t: Tensor) -> Tensor:
        *lead, n, _ = t.shape
        return t.reshape(*lead, n, self.n_heads, self.head_dim).transpose(-2, -3)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected feature width {self.dim}, got {x.shape[-1]}")
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)   # [..., H, n, n]
        if mask is not None:
            n = x.shape[-2]
            if mask.shape[-2:] != (n, n):
                raise ValueError(f"mask shape {tuple(mask.shape)} does not match {n} nodes")
            scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        ctx = (weights @ v).transpose(-2, -3)                          # [..., n, H, hd]
        ctx = ctx.reshape(*ctx.shape[:-2], self.n_heads * self.head_dim)
        return self.out(ctx)


def attention_forward(params: GraphAttention, features: Tensor, graph: Graph, masked: bool) -> Tensor:
    if features.shape[-2] != graph.n:
        raise ValueError(f"graph has {graph.n} nodes but features have {features.shape[-2]}")
    return params(features, graph_mask(graph) if masked else None)


class HyperNet(nn.Module):
    """Maps a state vector to a weight tensor of shape ``out_shape``.

    ``hidden=None`` gives a single affine map. With ``positive=True`` the
    generated weights pass through ``abs``.
    """

    def __init__(self, state_dim: int, out_shape: Sequence[int], hidden: Optional[int] = None,
                 positive: bool = False, activation: str = "elu"):
        super().__init__()
        self.state_dim = state_dim
        self.out_shape = tuple(out_shape)
        self.positive = positive
        size = int(np.prod(self.out_shape))
        sizes = [state_dim, size] if hidden is None else [state_dim, hidden, size]
        self.net = MLP(sizes, activation)

    def forward(self, state: Tensor) -> Tensor:
        if state.shape[-1] != self.state_dim:
            raise ValueError(f"expected state width {self.state_dim}, got {state.shape[-1]}")
        w = self.net(state).reshape(*state.shape[:-1], *self.out_shape)
        return w.abs() if self.positive else w


def hypernet_forward(params: HyperNet, state: Tensor) -> Tensor:
    return params(state)


# ----------------------------------------------------------------------------
# Generalised aggregation
# ----------------------------------------------------------------------------

def aggregation_exponent(rho: Tensor) -> Tensor:
    rho = torch.clamp(rho, -RHO_LIMIT, RHO_LIMIT)
    p = torch.tan(0.5 * math.pi * rho)
    small = p.abs() < P_MIN
    return torch.where(small, torch.where(p < 0, -P_MIN, P_MIN).to(p.dtype), p)


def generalized_aggregate(x: Tensor, rho, alpha, dim: int = -1) -> Tensor:
    """Power-mean family pooling over ``dim``.

    ``[n^(alpha-1) * sum_i x_i^p]^(1/p)`` with ``p = tan(pi*rho/2)``: p=1 gives
    sum (alpha=1) or mean (alpha=0), p -> inf gives max, p -> -inf gives min.
    Inputs must be strictly positive. Values are sorted along ``dim`` first so
    the result is exactly invariant to permutations.
    """
    if torch.any(x <= 0):
        raise ValueError("generalized_aggregate requires strictly positive inputs")
    rho = torch.as_tensor(rho, dtype=x.dtype)
    alpha = torch.as_tensor(alpha, dtype=x.dtype)
    n = x.shape[dim]
    p = aggregation_exponent(rho)
    xs, _ = torch.sort(x, dim=dim)
    lse = torch.logsumexp(p * torch.log(xs), dim=dim)
    return torch.exp(((alpha - 1) * math.log(n) + lse) / p)


class GeneralizedAggregation(nn.Module):
    """Trainable :func:`generalized_aggregate`.

    rho = tanh(rho_raw) in [-1, 1], alpha = sigmoid(alpha_raw) in [0, 1].
    Initialised at p = 1 and alpha ~ 1, i.e. close to a plain sum.
    """

    def __init__(self, rho: float = 0.5, alpha_raw: float = 10.0):
        super().__init__()
        self.rho_raw = nn.Parameter(torch.tensor(math.atanh(rho)))
        self.alpha_raw = nn.Parameter(torch.tensor(float(alpha_raw)))

    @property
    def rho(self) -> Tensor:
        return torch.tanh(self.rho_raw)

    @property
    def alpha(self) -> Tensor:
        return torch.sigmoid(self.alpha_raw)

    def forward(self, x: Tensor, dim: int = -1) -> Tensor:
        return generalized_aggregate(x, self.rho, self.alpha, dim=dim)


# ----------------------------------------------------------------------------
# Finite-difference gradient check
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    finite: bool = True
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.finite and self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else "-"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(worst {worst}, tol {self.tolerance:g}) {self.message}").strip()


def grad_check(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], tolerance: float = 1e-4,
               eps: float = 1e-5, floor: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``tensors`` are float64 leaf tensors that ``loss_fn`` reads; they are
    perturbed in place one element at a time. The error of a component is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"{name}: gradient checks run at float64, got {t.dtype}")
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        return GradCheckReport(float("inf"), tolerance=tolerance, finite=False,
                               message="non-finite loss at the check point")
    names = list(tensors)
    grads = torch.autograd.grad(loss, [tensors[k] for k in names], allow_unused=True)
    report = GradCheckReport(0.0, tolerance=tolerance)
    with torch.no_grad():
        for name, g in zip(names, grads):
            t = tensors[name]
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            worst = 0.0
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    report.finite = False
                    report.message = f"non-finite loss perturbing {name}[{k}]"
                    continue
                fd = (up - down) / (2 * eps)
                an = g.view(-1)[k].item()
                err = abs(an - fd) / max(abs(an), abs(fd), floor)
                worst = max(worst, err)
            report.per_tensor[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst)
    return report


def module_grad_check(module: nn.Module, *inputs: Tensor, tolerance: float = 1e-4,
                      seed: int = 0, forward: Optional[Callable] = None, **kwargs) -> GradCheckReport:
    """Gradient-check ``module`` w.r.t. its parameters and floating inputs.

    The module is converted to float64 in place. The scalar loss is a fixed
    random projection of the output so every output element matters.
    """
    module.double()
    inputs = tuple(x.double().clone() if torch.is_floating_point(x) else x for x in inputs)
    fwd = forward or module
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out_shape = fwd(*inputs).shape
    proj = torch.randn(out_shape, generator=gen, dtype=torch.float64)

    def loss_fn():
        return (fwd(*inputs) * proj).sum()

    tensors = {f"param:{name}": p for name, p in module.named_parameters()}
    for k, x in enumerate(inputs):
        if torch.is_floating_point(x):
            tensors[f"input:{k}"] = x
    return grad_check(loss_fn, tensors, tolerance=tolerance, **kwargs)
