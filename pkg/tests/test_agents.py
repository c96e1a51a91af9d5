import numpy as np
import pytest
import torch

from qgnn.agents import (AttentionModel, LocalModel, QGNNModel, make_model, qgnn_q_values,
                         select_actions)
from qgnn.graph import Graph, build_empty, build_fully_connected
from qgnn.layers import graph_mask, grad_check


def _inputs(model, B=None):
    lead = () if B is None else (B,)
    obs = torch.randn(*lead, model.n_agents, model.obs_dim)
    prev = torch.zeros(*lead, model.n_agents, model.n_actions)
    return obs, prev, model.init_hidden(*lead)


@pytest.mark.parametrize("kind", ["local", "qgnn", "attention", "attention-graph"])
def test_forward_shapes(kind):
    model = make_model(kind, obs_dim=3, n_actions=5, n_agents=4, hidden=8)
    obs, prev, h = _inputs(model, B=2)
    q, h2 = model(obs, prev, h, torch.ones(2, 4, 4, dtype=torch.bool))
    assert q.shape == (2, 4, 5) and h2.shape == (2, 4, 8)


def test_make_model_unknown():
    with pytest.raises(ValueError):
        make_model("transformer", 1, 2, 2)


def test_observation_shape_checked():
    model = make_model("local", 3, 5, 4, hidden=8)
    with pytest.raises(ValueError):
        model(torch.randn(4, 2), torch.zeros(4, 5), model.init_hidden(), None)


def test_unroll_matches_stepwise_forward():
    model = make_model("qgnn", 2, 3, 4, hidden=8)
    B, T = 3, 4
    obs = torch.randn(B, T, 4, 2)
    actions = torch.randint(0, 3, (B, T, 4))
    mask = torch.ones(B, 4, 4, dtype=torch.bool)
    out = model.unroll(obs, actions, mask)
    h = model.init_hidden(B)
    prev = torch.zeros(B, 4, 3)
    for t in range(T):
        q, h = model(obs[:, t], prev, h, mask)
        assert torch.allclose(out[:, t], q)
        prev = torch.nn.functional.one_hot(actions[:, t], 3).float()


def _q_with_perturbed_agent(model, mask, agent):
    obs, prev, h = _inputs(model)
    base, _ = model(obs, prev, h, mask)
    obs2 = obs.clone()
    obs2[agent] += 1.0
    moved, _ = model(obs2, prev, h, mask)
    return (moved - base).abs().amax(-1) > 1e-7


def test_local_model_ignores_other_agents():
    model = make_model("local", 2, 3, 4, hidden=8)
    changed = _q_with_perturbed_agent(model, None, agent=2)
    assert changed.tolist() == [False, False, True, False]


def test_qgnn_receptive_field_is_two_hops():
    model = make_model("qgnn", 2, 3, 5, hidden=8)
    path = Graph(5, ((0, 1), (1, 2), (2, 3), (3, 4)))
    changed = _q_with_perturbed_agent(model, graph_mask(path), agent=0)
    assert changed.tolist() == [True, True, True, False, False]


def test_attention_graph_respects_mask_but_full_attention_does_not():
    g = Graph(4, ((0, 1),))
    masked = make_model("attention-graph", 2, 3, 4, hidden=8)
    assert _q_with_perturbed_agent(masked, graph_mask(g), agent=0).tolist() == [True, True, False, False]
    full = make_model("attention", 2, 3, 4, hidden=8)
    assert _q_with_perturbed_agent(full, graph_mask(g), agent=0).all()


def test_qgnn_is_permutation_equivariant(rng):
    model = make_model("qgnn", 2, 3, 5, hidden=8).double()
    g = Graph(5, ((0, 1), (1, 2), (3, 4), (0, 4)))
    enc = torch.randn(5, 8, dtype=torch.float64)
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    q = qgnn_q_values(model, enc, g)
    q_perm = qgnn_q_values(model, enc[inv], g.relabel(perm))
    assert torch.allclose(q_perm, q[inv], atol=1e-12)


def test_agent_id_input_flag():
    model = make_model("local", 2, 3, 4, hidden=8, agent_id=True)
    assert model.input_dim == 2 + 3 + 1
    x = model.build_inputs(torch.zeros(4, 2), torch.zeros(4, 3))
    assert torch.allclose(x[:, -1], torch.tensor([0, 1 / 3, 2 / 3, 1]))


def test_end_to_end_model_gradient():
    model = make_model("qgnn", 2, 2, 3, hidden=3).double()
    obs = torch.randn(1, 2, 3, 2, dtype=torch.float64)
    actions = torch.randint(0, 2, (1, 2, 3))
    mask = graph_mask(build_fully_connected(3)).unsqueeze(0)
    tensors = {n: p for n, p in model.named_parameters()}
    report = grad_check(lambda: model.unroll(obs, actions, mask).pow(2).sum(), tensors)
    assert report.ok, str(report)


# -- action selection -------------------------------------------------------------

def test_greedy_selection_lowest_index_ties(rng):
    q = torch.tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]])
    assert select_actions(q, 0.0, rng).tolist() == [1, 0]


def test_greedy_respects_availability(rng):
    q = torch.tensor([[1.0, 3.0, 2.0]])
    assert select_actions(q, 0.0, rng, np.array([[True, False, True]])).tolist() == [2]
    with pytest.raises(ValueError):
        select_actions(q, 0.0, rng, np.array([[False, False, False]]))


def test_full_exploration_is_uniform(rng):
    q = torch.zeros(1000, 4)
    q[:, 0] = 1.0
    counts = np.bincount(select_actions(q, 1.0, rng), minlength=4)
    assert np.all(np.abs(counts - 250) < 60)


def test_random_stream_consumption_independent_of_epsilon():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    select_actions(torch.randn(3, 4), 0.0, a)
    select_actions(torch.randn(3, 4), 1.0, b)
    assert a.random() == b.random()


def test_epsilon_validated(rng):
    with pytest.raises(ValueError):
        select_actions(torch.zeros(2, 2), 1.5, rng)
