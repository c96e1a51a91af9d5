import itertools

import numpy as np
import pytest
import torch

from qgnn.layers import grad_check
from qgnn.mixers import QGNNMixer, QMixer, VDNMixer, make_mixer, qgnn_mix, qmix_mix, vdn_mix


def test_vdn_is_sum():
    q = torch.randn(5, 4)
    assert torch.equal(vdn_mix(q), q.sum(-1))
    assert torch.equal(VDNMixer()(q), q.sum(-1))


def test_qmix_parameter_count():
    mixer = QMixer(8, 8)
    assert sum(p.numel() for p in mixer.parameters()) == 20481


def test_qgnn_parameter_count_independent_of_agents():
    mixer = QGNNMixer()
    assert mixer.num_mixing_parameters() == 193
    q2, q64 = torch.randn(3, 2), torch.randn(3, 64)
    assert mixer(q2).shape == (3,) and mixer(q64).shape == (3,)


def test_qmix_requires_state():
    with pytest.raises(ValueError):
        QMixer(2, 3)(torch.randn(2))


def test_qmix_agent_count_checked():
    with pytest.raises(ValueError):
        QMixer(2, 3)(torch.randn(3), torch.randn(3))


def test_make_mixer():
    assert isinstance(make_mixer("qgnn", 4, 4), QGNNMixer)
    with pytest.raises(ValueError):
        make_mixer("qtran", 4, 4)


def _mixers(n, state_dim):
    return {"vdn": VDNMixer(), "qmix": QMixer(n, state_dim).double(), "qgnn": QGNNMixer().double()}


@pytest.mark.parametrize("kind", ["vdn", "qmix", "qgnn"])
def test_monotone_by_autograd(kind):
    torch.manual_seed(1)
    mixer = _mixers(5, 6)[kind]
    q = (torch.randn(500, 5, dtype=torch.float64) * 3).requires_grad_(True)
    state = torch.randn(500, 6, dtype=torch.float64)
    (g,) = torch.autograd.grad(mixer(q, state).sum(), q)
    assert (g >= 0).all()


@pytest.mark.parametrize("kind", ["qmix", "qgnn"])
def test_individual_global_max_by_enumeration(kind):
    """Per-agent greedy actions maximise the mixed value over every joint action."""
    torch.manual_seed(2)
    n, A = 3, 3
    for trial in range(20):
        mixer = _mixers(n, 4)[kind]
        table = torch.randn(n, A, dtype=torch.float64)
        state = torch.randn(4, dtype=torch.float64)
        joint = torch.tensor(list(itertools.product(range(A), repeat=n)))
        values = mixer(table[torch.arange(n), joint], state.expand(len(joint), 4))
        greedy = table.argmax(-1)
        assert mixer(table[torch.arange(n), greedy], state) >= values.max() - 1e-12


def test_qgnn_mixer_permutation_invariant_exact(rng):
    mixer = QGNNMixer()
    q = torch.randn(10, 7)
    base = mixer(q)
    for _ in range(20):
        assert torch.equal(mixer(q[:, rng.permutation(7)]), base)


def test_mixer_gradients_match_finite_differences():
    torch.manual_seed(3)
    q = torch.randn(3, 4, dtype=torch.float64)
    s = torch.randn(3, 5, dtype=torch.float64)
    qmix = QMixer(4, 5, embed=3, hypernet_hidden=4).double()
    tensors = {"q": q, "s": s, **dict(qmix.named_parameters())}
    assert grad_check(lambda: qmix_mix(qmix, q, s).sum(), tensors).ok
    qg = QGNNMixer(width=4, outer_hidden=3).double()
    with torch.no_grad():
        qg.aggregate.rho_raw.fill_(0.4)
        qg.aggregate.alpha_raw.fill_(0.3)
    tensors = {"q": q, **dict(qg.named_parameters())}
    assert grad_check(lambda: qgnn_mix(qg, q).sum(), tensors).ok
