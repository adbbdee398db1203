import dataclasses

import numpy as np
import pytest
from scipy.linalg import svdvals

from models import NumericalFailure, SampleSet, TrainConfig, TransportNet
from neural_map import (
    ParamGrads,
    adam_step,
    approx_budget,
    as_callable,
    forward,
    forward_trace,
    identity_net,
    init_net,
    init_optim,
    lipschitz_upper_bound,
    loss_and_grad,
    spectral_norm,
)
from seed_manager import make_rng
from trainer import train


def diagonal_net(first, second):
    d = len(first)
    return TransportNet((d, d, d), [np.diag(first), np.diag(second)], [np.zeros(d), np.zeros(d)])


class TestArchitecture:
    def test_parameter_count(self):
        assert init_net((1, 256, 256, 1), seed=0).num_parameters == 66561

    def test_he_initialization(self):
        net = init_net((256, 256, 1), seed=4)
        assert net.weights[0].std() == pytest.approx(np.sqrt(2 / 256), rel=0.02)
        assert all(not np.any(b) for b in net.biases)

    def test_initialization_is_deterministic(self):
        a, b = init_net((2, 8, 2), seed=9), init_net((2, 8, 2), seed=9)
        assert all(np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))

    def test_invalid_layers(self):
        with pytest.raises(ValueError):
            init_net((3,), seed=0)
        with pytest.raises(ValueError):
            init_net((2, 0, 2), seed=0)


class TestForward:
    def test_identity_net_is_exact(self):
        x = make_rng(1).standard_normal((20, 2))
        np.testing.assert_array_equal(forward(identity_net(2, width=6), x), x)

    def test_single_point(self):
        out = forward(identity_net(1), np.array([0.25]))
        assert out.shape == (1,)
        assert out[0] == 0.25

    def test_accepts_sample_sets(self):
        xs = SampleSet(np.linspace(0, 1, 5), "grid", 0)
        assert forward(identity_net(1), xs).shape == (5, 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(identity_net(2), np.zeros((4, 3)))

    def test_overflow_raises_numerical_failure(self):
        net = TransportNet((1, 1, 1), [np.array([[1e300]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        with pytest.raises(NumericalFailure):
            forward(net, np.array([[1e10]]))

    def test_non_callable_model(self):
        with pytest.raises(ValueError):
            as_callable(42)


def kink_free_batch(net, seed):
    """Inputs whose hidden pre-activations stay clear of zero under small perturbations"""
    for attempt in range(200):
        x = make_rng(seed + 1000 * attempt).standard_normal((6, net.d_in))
        _, pre = forward_trace(net, x)
        if all(np.abs(z).min() > 1e-3 for z in pre[:-1]):
            return x
    raise AssertionError("no kink-free batch found")


@pytest.mark.parametrize("dims", [(1, 4, 1), (2, 5, 4, 2), (2, 8, 2), (1, 16, 16, 1), (2, 16, 16, 2)])
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(dims, seed):
    net = init_net(dims, seed=seed)
    x = kink_free_batch(net, seed)
    y = make_rng(seed + 50).standard_normal((6, dims[-1]))
    _, grads = loss_and_grad(net, x, y)
    # away from kinks the loss is quadratic in any single parameter
    eps = 1e-5
    for attr, analytic in (("weights", grads.weights), ("biases", grads.biases)):
        for l, p in enumerate(getattr(net, attr)):
            for idx in np.ndindex(p.shape):
                plus, minus = net.copy(), net.copy()
                getattr(plus, attr)[l][idx] += eps
                getattr(minus, attr)[l][idx] -= eps
                numeric = (loss_and_grad(plus, x, y)[0] - loss_and_grad(minus, x, y)[0]) / (2 * eps)
                assert analytic[l][idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8), (attr, l, idx)


def test_loss_is_mean_squared_distance():
    x = np.array([[0.0], [1.0]])
    y = np.array([[1.0], [3.0]])
    loss, _ = loss_and_grad(identity_net(1), x, y)
    assert loss == pytest.approx(2.5)


def test_loss_target_shape_mismatch():
    with pytest.raises(ValueError):
        loss_and_grad(identity_net(1), np.zeros((3, 1)), np.zeros((4, 1)))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        net = init_net((2, 3, 1), seed=0)
        grads = ParamGrads([np.full_like(w, 0.5) for w in net.weights],
                           [np.full_like(b, -2.0) for b in net.biases])
        opt = init_optim(net, lr=1e-2)
        new_net, new_opt = adam_step(net, grads, opt)
        for old, new in zip(net.weights, new_net.weights):
            np.testing.assert_allclose(new - old, -1e-2, atol=1e-8)
        for old, new in zip(net.biases, new_net.biases):
            np.testing.assert_allclose(new - old, 1e-2, atol=1e-8)
        assert new_opt.step == 1

    def test_inputs_are_not_mutated(self):
        net = init_net((1, 4, 1), seed=1)
        before = [w.copy() for w in net.weights]
        _, grads = loss_and_grad(net, np.ones((3, 1)), np.zeros((3, 1)))
        opt = init_optim(net)
        adam_step(net, grads, opt)
        assert all(np.array_equal(a, b) for a, b in zip(before, net.weights))
        assert opt.step == 0

    def test_step_schedule(self):
        opt = init_optim(init_net((1, 2, 1), seed=0), lr=1e-2, step_size=500, gamma=0.9)
        assert dataclasses.replace(opt, step=499).learning_rate == pytest.approx(1e-2)
        assert dataclasses.replace(opt, step=500).learning_rate == pytest.approx(9e-3)
        assert dataclasses.replace(opt, step=1000).learning_rate == pytest.approx(8.1e-3)

    def test_mismatched_gradients(self):
        net = init_net((1, 2, 1), seed=0)
        with pytest.raises(ValueError):
            adam_step(net, ParamGrads(net.weights[:1], net.biases), init_optim(net))


class TestLipschitz:
    def test_diagonal_product(self):
        assert lipschitz_upper_bound(diagonal_net([2.0, 1.0], [5.0, 3.0])) == pytest.approx(10.0)

    def test_spectral_norm_matches_svd(self):
        w = make_rng(2).standard_normal((7, 4))
        assert spectral_norm(w) == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-10)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    def test_spectral_norm_is_the_svd_value(self):
        # nearly tied top singular values
        w = np.diag([1.0, 1.0 - 1e-12, 0.5]) @ np.linalg.qr(make_rng(3).standard_normal((3, 3)))[0]
        assert spectral_norm(w) == svdvals(w)[0]

    @pytest.mark.parametrize("dims", [(1, 8, 1), (2, 16, 2), (1, 32, 32, 1), (2, 64, 64, 2), (2, 16, 16, 2)])
    @pytest.mark.parametrize("seed", [5, 6])
    @pytest.mark.parametrize("trained", [False, True])
    def test_bounds_empirical_slopes(self, dims, seed, trained):
        net = init_net(dims, seed=seed)
        if trained:
            rng = make_rng(seed + 100)
            xs = SampleSet(rng.random((64, dims[0])), "source", seed)
            ys = SampleSet(rng.standard_normal((64, dims[-1])), "target", seed)
            net, _ = train(xs, ys, net, TrainConfig(max_iters=100, patience=100, seed=seed))
        rng = make_rng(seed + 1)
        a, b = rng.standard_normal((10_000, dims[0])), rng.standard_normal((10_000, dims[0]))
        ratios = np.linalg.norm(forward(net, a) - forward(net, b), axis=1) / np.linalg.norm(a - b, axis=1)
        assert ratios.max() <= lipschitz_upper_bound(net) * (1 + 1e-9)


class TestApproxBudget:
    def test_unit_case(self):
        budget = approx_budget(W=1, L=1, alpha=1.0, lambda_h=1.0, B=1.0, d=1)
        assert budget.bound == pytest.approx(38.0)
        assert budget.prescribed_width == 162
        assert budget.prescribed_depth == 28

    def test_rate_in_width(self):
        small = approx_budget(W=4, L=2, alpha=0.5, lambda_h=1.0, B=1.0, d=2)
        large = approx_budget(W=8, L=2, alpha=0.5, lambda_h=1.0, B=1.0, d=2)
        assert large.bound / small.bound == pytest.approx(2 ** -0.5)

    @pytest.mark.parametrize("alpha", [0.0, 1.5])
    def test_exponent_range(self, alpha):
        with pytest.raises(ValueError):
            approx_budget(W=2, L=2, alpha=alpha, lambda_h=1.0, B=1.0, d=1)
