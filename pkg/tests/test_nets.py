import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from care_lab.nets import (LOG_STD_MAX, LOG_STD_MIN, MlpSpec, PolicyHead, mlp_forward, mlp_init,
                           policy_mean_action, policy_sample, squashed_log_prob)
from care_lab.tensor import ShapeError, Tensor, gradcheck

from helpers import GRAD_SEEDS, log_prob_case, mlp_case


def _arrays(net):
    return [p.data.tobytes() for p in net.params]


def test_init_deterministic_and_seed_sensitive():
    spec = MlpSpec(5, (7, 7), 2, seed=11)
    assert _arrays(mlp_init(spec)) == _arrays(mlp_init(spec))
    other = mlp_init(MlpSpec(5, (7, 7), 2, seed=12))
    assert _arrays(other) != _arrays(mlp_init(spec))


def test_init_bounds_and_zero_bias():
    net = mlp_init(MlpSpec(4, (9,), 3, seed=0))
    assert np.all(np.abs(net.weights[0].data) <= 0.5)
    assert np.all(np.abs(net.weights[1].data) <= 1.0 / 3.0)
    assert all(np.all(b.data == 0.0) for b in net.biases)


def test_layer_count():
    for hidden in [(), (3,), (3, 4, 5)]:
        assert len(mlp_init(MlpSpec(2, hidden, 1)).weights) == len(hidden) + 1


def test_invalid_spec():
    with pytest.raises(ValueError):
        MlpSpec(0, (3,), 1)
    with pytest.raises(ValueError):
        MlpSpec(2, (3,), 1, activation="gelu")


def test_zero_parameters_give_zero_output():
    net = mlp_init(MlpSpec(3, (4,), 2))
    for p in net.params:
        p.data[...] = 0.0
    np.testing.assert_array_equal(net(Tensor(np.ones((5, 3)))).data, np.zeros((5, 2)))


def test_identity_single_layer():
    net = mlp_init(MlpSpec(3, (), 3))
    net.weights[0].data[...] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(net(Tensor(x)).data, x)


def _loop_forward(net, x):
    h = [list(row) for row in x]
    n = len(net.weights)
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        W, B = w.data, b.data
        out = []
        for row in h:
            vals = []
            for j in range(W.shape[1]):
                s = B[j]
                for i in range(W.shape[0]):
                    s += row[i] * W[i, j]
                vals.append(max(s, 0.0) if li < n - 1 else s)
            out.append(vals)
        h = out
    return np.array(h)


def test_forward_matches_loop_oracle():
    net = mlp_init(MlpSpec(4, (6, 5), 3, seed=5))
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(mlp_forward(net, Tensor(x)).data, _loop_forward(net, x), atol=1e-12, rtol=0)


def test_forward_dim_mismatch():
    net = mlp_init(MlpSpec(4, (6,), 3))
    with pytest.raises(ShapeError):
        net(Tensor(np.ones((2, 5))))


def test_forward_gradients():
    for seed in GRAD_SEEDS:
        build, leaves = mlp_case(seed)
        assert gradcheck(build, leaves).max_rel_error < 1e-5


def test_multihead_routes_rows_to_heads():
    net = mlp_init(MlpSpec(3, (4,), 2, seed=1, n_heads=3))
    x = np.random.default_rng(0).normal(size=(5, 3))
    idx = np.array([0, 2, 1, 2, 0])
    out = net(Tensor(x), head_index=idx).data
    h = np.maximum(x @ net.weights[0].data + net.biases[0].data, 0.0)
    for r, i in enumerate(idx):
        np.testing.assert_allclose(out[r], h[r] @ net.weights[1].data[i] + net.biases[1].data[i], atol=1e-12)


# -- policy head ---------------------------------------------------------------


def test_deterministic_limit_at_min_log_std():
    head = PolicyHead(4, 2, (5,), seed=0)
    z = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    # push the log-std outputs far below the clamp
    head.net.biases[-1].data[2:] = -1e3
    a, lp = policy_sample(head, z, np.zeros((3, 2)))
    np.testing.assert_allclose(a.data, policy_mean_action(head, z), atol=1e-15)
    assert np.all(np.isfinite(lp.data))


def test_sample_deterministic():
    head = PolicyHead(4, 3, (5,), seed=2)
    z = Tensor(np.random.default_rng(0).normal(size=(6, 4)))
    noise = np.random.default_rng(1).normal(size=(6, 3))
    a1, l1 = policy_sample(head, z, noise)
    a2, l2 = policy_sample(head, z, noise)
    assert a1.data.tobytes() == a2.data.tobytes() and l1.data.tobytes() == l2.data.tobytes()


@given(st.floats(-1e3, 1e3), st.floats(LOG_STD_MIN - 5, LOG_STD_MAX + 5), st.floats(-8, 8))
@settings(max_examples=200, deadline=None)
def test_actions_open_interval_and_finite_log_prob(mu_bias, ls_bias, noise):
    head = PolicyHead(2, 1, (3,), seed=0)
    head.net.biases[-1].data[:] = [mu_bias, ls_bias]
    a, lp = policy_sample(head, Tensor(np.zeros((1, 2))), np.array([[noise]]))
    assert -1.0 < a.data[0, 0] < 1.0
    assert np.isfinite(lp.data[0])


def test_log_prob_integrates_to_one_in_1d():
    mu, log_std = 0.3, np.log(0.6)
    grid = np.linspace(-1.0, 1.0, 200001)[1:-1]
    u = np.arctanh(grid)
    noise = ((u - mu) / np.exp(log_std))[:, None]
    lp = squashed_log_prob(Tensor(np.full((grid.size, 1), log_std)), noise, Tensor(grid[:, None])).data
    integral = np.trapezoid(np.exp(lp), grid)
    assert abs(integral - 1.0) < 1e-2


def test_log_prob_gradient():
    for seed in GRAD_SEEDS:
        build, leaves = log_prob_case(seed)
        assert gradcheck(build, leaves).max_rel_error < 1e-4
