import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnkit.data import Dataset
from bnnkit.errors import LayoutError, UnsupportedTransformError
from bnnkit.network import (HEAD_FIXED, NetworkSpec, ParameterVector, forward,
                            forward_batch, grad_log_likelihood, grad_log_posterior,
                            grad_log_prior, init_parameters, layout_for,
                            log_likelihood, log_posterior_unnorm, log_prior,
                            permute_hidden, relu_rescale, tanh_sign_flip, unflatten)
from bnnkit.numerics import DensityParams, RngStream

UNIT_GAUSSIAN = DensityParams("gaussian", 0.0, 1.0)


def random_state(spec, seed, n=10, scale=0.5):
    gen = RngStream(seed).generator()
    d = layout_for(spec).size
    theta = scale * gen.normal(size=d)
    data = Dataset(X=gen.normal(size=(n, spec.input_dim)), y=gen.normal(size=n))
    return theta, data


def fd_gradient(fn, theta, h=1e-5):
    grad = np.empty(theta.size)
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (fn(plus) - fn(minus)) / (2.0 * h)
    return grad


class TestLayout:
    def test_slices_partition_exactly(self):
        spec = NetworkSpec(3, (5, 4))
        layout = layout_for(spec)
        covered = np.zeros(layout.size, dtype=int)
        for ls in layout.layers:
            covered[ls.weights] += 1
            if ls.bias is not None:
                covered[ls.bias] += 1
        assert np.all(covered == 1)
        # 3*5+5 + 5*4+4 + 4*2+2
        assert layout.size == 20 + 24 + 10

    def test_no_bias_fixed_head_has_two_params_for_1_1_net(self):
        spec = NetworkSpec(1, (1,), head=HEAD_FIXED, biases=False)
        assert layout_for(spec).size == 2

    def test_wrong_length_vector_rejected(self):
        spec = NetworkSpec(2, (3,))
        with pytest.raises(LayoutError):
            forward_batch(spec, np.zeros(layout_for(spec).size + 1), np.zeros((1, 2)))

    def test_input_dimension_mismatch_names_layer(self):
        spec = NetworkSpec(2, (3,))
        with pytest.raises(LayoutError, match="layer 1"):
            forward_batch(spec, np.zeros(layout_for(spec).size), np.zeros((1, 5)))


class TestForward:
    def test_zero_parameters_give_zero_outputs(self):
        spec = NetworkSpec(4, (8, 8))
        mu, log_var = forward(spec, ParameterVector.zeros(spec), np.zeros(4))
        assert mu == 0.0 and log_var == 0.0

    def test_two_weight_tanh_net(self):
        spec = NetworkSpec(1, (1,), activation="tanh", head=HEAD_FIXED, biases=False)
        mu, _ = forward(spec, np.array([1.0, 1.0]), np.array([1.0]))
        assert mu == pytest.approx(math.tanh(1.0), abs=1e-12)

    def test_two_weight_relu_dead_region(self):
        spec = NetworkSpec(1, (1,), activation="relu", head=HEAD_FIXED, biases=False)
        mu, _ = forward(spec, np.array([-1.0, 1.0]), np.array([1.0]))
        assert mu == 0.0

    def test_log_var_clamped(self):
        spec = NetworkSpec(1, (1,))
        layout = layout_for(spec)
        theta = np.zeros(layout.size)
        theta[layout.layers[-1].bias.start + 1] = 50.0  # log-variance head bias
        _, log_var = forward(spec, theta, np.array([0.0]))
        assert log_var == 15.0

    def test_activation_values(self):
        x = np.array([1.0])
        for activation, expected in [
            ("silu", 1.5 / (1.0 + math.exp(-1.5))),
            ("leaky_relu", 1.5),
            ("truncated_relu", 1.0),
        ]:
            spec = NetworkSpec(1, (1,), activation=activation, head=HEAD_FIXED,
                               biases=False)
            mu, _ = forward(spec, np.array([1.5, 1.0]), x)
            assert mu == pytest.approx(expected, abs=1e-12)
        spec = NetworkSpec(1, (1,), activation="leaky_relu", leaky_slope=0.1,
                           head=HEAD_FIXED, biases=False)
        mu, _ = forward(spec, np.array([-2.0, 1.0]), x)
        assert mu == pytest.approx(-0.2, abs=1e-12)


class TestLogDensities:
    def test_single_point_at_its_mean(self):
        spec = NetworkSpec(1, (1,))
        theta = ParameterVector.zeros(spec)
        data = Dataset(X=np.array([[0.3]]), y=np.array([0.0]))
        assert log_likelihood(spec, theta, data) == pytest.approx(-0.9189385, abs=1e-6)

    def test_additivity_over_duplicated_points(self):
        spec = NetworkSpec(2, (4,))
        theta, _ = random_state(spec, 1)
        x = np.array([[0.5, -0.2]])
        single = Dataset(X=x, y=np.array([0.7]))
        double = Dataset(X=np.vstack([x, x]), y=np.array([0.7, 0.7]))
        assert log_likelihood(spec, theta, double) == pytest.approx(
            2.0 * log_likelihood(spec, theta, single), abs=1e-12)

    def test_matches_independent_density_summation(self):
        # oracle: per-point scipy normal logpdf over a loop
        from scipy import stats

        spec = NetworkSpec(3, (5,), activation="silu")
        theta, data = random_state(spec, 2, n=5)
        total = 0.0
        for i in range(5):
            mu, log_var = forward(spec, theta, data.X[i])
            total += stats.norm(mu, math.exp(0.5 * log_var)).logpdf(data.y[i])
        assert log_likelihood(spec, theta, data) == pytest.approx(total, abs=1e-10)

    def test_order_invariance(self):
        spec = NetworkSpec(2, (4,))
        theta, data = random_state(spec, 3, n=12)
        perm = RngStream(4).generator().permutation(12)
        shuffled = Dataset(X=data.X[perm], y=data.y[perm])
        assert log_likelihood(spec, theta, data) == pytest.approx(
            log_likelihood(spec, theta, shuffled), abs=1e-10)

    def test_log_prior_values(self):
        assert log_prior(np.zeros(2), UNIT_GAUSSIAN) == pytest.approx(-1.8378771, abs=1e-6)
        assert log_prior(np.zeros(1), DensityParams("laplace")) == pytest.approx(
            -0.6931472, abs=1e-6)

    def test_gaussian_prior_scaling_identity(self):
        # log N(2 theta; 0, tau) = log N(theta; 0, tau/... ) closed-form shift
        gen = RngStream(5).generator()
        theta = gen.normal(size=7)
        tau = 0.8
        lhs = log_prior(2.0 * theta, DensityParams("gaussian", 0.0, tau))
        rhs = log_prior(theta, DensityParams("gaussian", 0.0, tau / 2.0)) - 7 * math.log(2.0)
        assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_posterior_is_sum(self):
        spec = NetworkSpec(2, (3,))
        theta, data = random_state(spec, 6)
        assert log_posterior_unnorm(spec, theta, data, UNIT_GAUSSIAN) == pytest.approx(
            log_likelihood(spec, theta, data) + log_prior(theta, UNIT_GAUSSIAN), abs=1e-12)

    def test_two_weight_posterior_sign_symmetry(self):
        spec = NetworkSpec(1, (1,), activation="tanh", head=HEAD_FIXED, biases=False)
        data = Dataset(X=np.array([[1.0]]), y=np.array([math.tanh(1.0)]))
        for w1, w2 in [(0.5, 1.2), (2.0, -0.3), (1.0, 1.0)]:
            a = log_posterior_unnorm(spec, np.array([w1, w2]), data, UNIT_GAUSSIAN)
            b = log_posterior_unnorm(spec, np.array([-w1, -w2]), data, UNIT_GAUSSIAN)
            assert a == pytest.approx(b, abs=1e-10)

    def test_tight_prior_dominates_far_from_origin(self):
        # grid ordering: a remote parameter loses more posterior mass under
        # tau=0.1 than under tau=10, relative to the origin
        spec = NetworkSpec(1, (1,), activation="tanh", head=HEAD_FIXED, biases=False)
        data = Dataset(X=np.array([[1.0]]), y=np.array([0.5]))
        far, origin = np.array([3.0, 3.0]), np.zeros(2)
        drops = {}
        for tau in (0.1, 10.0):
            prior = DensityParams("gaussian", 0.0, tau)
            drops[tau] = (log_posterior_unnorm(spec, far, data, prior)
                          - log_posterior_unnorm(spec, origin, data, prior))
        assert drops[0.1] < drops[10.0]


class TestGradients:
    @pytest.mark.parametrize("activation", ["tanh", "relu", "leaky_relu", "silu",
                                            "truncated_relu"])
    def test_matches_finite_differences(self, activation):
        spec = NetworkSpec(3, (5, 4), activation=activation)
        theta, data = random_state(spec, 11, n=8)
        grad = grad_log_posterior(spec, theta, data, UNIT_GAUSSIAN)
        ref = fd_gradient(lambda t: log_posterior_unnorm(spec, t, data, UNIT_GAUSSIAN),
                          theta)
        rel = np.abs(grad - ref) / np.maximum(1e-6, np.abs(ref))
        assert rel.max() <= 1e-4

    def test_prior_only_gradient_is_minus_theta(self):
        theta = RngStream(12).generator().normal(size=9)
        np.testing.assert_allclose(grad_log_prior(theta, UNIT_GAUSSIAN), -theta,
                                   atol=1e-12)

    def test_laplace_prior_gradient(self):
        theta = np.array([2.0, -3.0, 0.0])
        np.testing.assert_allclose(
            grad_log_prior(theta, DensityParams("laplace", 0.0, 0.5)),
            [-2.0, 2.0, 0.0], atol=1e-12)

    def test_gradient_near_zero_at_local_maximum(self):
        # 1-parameter model: mu = w * x with fixed sigma; optimum has zero grad
        spec = NetworkSpec(1, (1,), head=HEAD_FIXED, biases=False, activation="tanh")
        data = Dataset(X=np.array([[1.0]]), y=np.array([0.4]))

        def objective(t):
            return log_posterior_unnorm(spec, t, data, UNIT_GAUSSIAN)

        theta = np.array([0.5, 0.5])
        for _ in range(4000):
            theta = theta + 0.01 * grad_log_posterior(spec, theta, data, UNIT_GAUSSIAN)
        assert np.abs(grad_log_posterior(spec, theta, data, UNIT_GAUSSIAN)).max() < 1e-6
        assert objective(theta) > objective(np.array([0.5, 0.5]))

    def test_relu_kink_uses_zero_subgradient(self):
        # pre-activation exactly 0: the unit passes no gradient
        spec = NetworkSpec(1, (1,), activation="relu", head=HEAD_FIXED)
        layout = layout_for(spec)
        theta = np.zeros(layout.size)
        theta[layout.layers[1].weights.start] = 1.0  # outgoing weight
        data = Dataset(X=np.array([[0.0]]), y=np.array([1.0]))
        grad = grad_log_likelihood(spec, theta, data)
        assert grad[layout.layers[0].weights.start] == 0.0
        assert grad[layout.layers[0].bias.start] == 0.0

    def test_likelihood_gradient_alone(self):
        spec = NetworkSpec(2, (4,), activation="silu")
        theta, data = random_state(spec, 13)
        ref = fd_gradient(lambda t: log_likelihood(spec, t, data), theta)
        rel = np.abs(grad_log_likelihood(spec, theta, data) - ref) / np.maximum(
            1e-6, np.abs(ref))
        assert rel.max() <= 1e-4


class TestSymmetries:
    def _random_perm(self, gen, width):
        return gen.permutation(width)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_preserves_forward_and_posterior(self, seed):
        gen = RngStream(seed).generator()
        spec = NetworkSpec(2, (5, 3), activation="tanh")
        theta, data = random_state(spec, seed, n=6)
        layer = int(gen.integers(0, 2))
        width = spec.hidden_widths[layer]
        perm = gen.permutation(width)
        moved = permute_hidden(spec, theta, layer, perm)
        xs = gen.normal(size=(20, 2))
        base = forward_batch(spec, theta, xs)
        new = forward_batch(spec, moved, xs)
        assert np.abs(base[0] - new[0]).max() <= 1e-12
        assert np.abs(base[1] - new[1]).max() <= 1e-12
        assert log_posterior_unnorm(spec, moved, data, UNIT_GAUSSIAN) == pytest.approx(
            log_posterior_unnorm(spec, theta, data, UNIT_GAUSSIAN), abs=1e-10)

    def test_identity_permutation_is_identity(self):
        spec = NetworkSpec(2, (4,))
        theta, _ = random_state(spec, 21)
        moved = permute_hidden(spec, theta, 0, np.arange(4))
        np.testing.assert_array_equal(moved.values, theta)

    def test_invalid_permutation_rejected(self):
        spec = NetworkSpec(2, (4,))
        theta, _ = random_state(spec, 22)
        with pytest.raises(ValueError):
            permute_hidden(spec, theta, 0, [0, 0, 1, 2])

    def test_sign_flip_is_involution_and_invariant(self):
        spec = NetworkSpec(3, (6,), activation="tanh")
        theta, data = random_state(spec, 23)
        flipped = tanh_sign_flip(spec, theta, 0, 2)
        back = tanh_sign_flip(spec, flipped, 0, 2)
        np.testing.assert_allclose(back.values, theta, atol=1e-15)
        xs = RngStream(24).generator().normal(size=(30, 3))
        base_mu, base_lv = forward_batch(spec, theta, xs)
        new_mu, new_lv = forward_batch(spec, flipped, xs)
        assert np.abs(base_mu - new_mu).max() <= 1e-12
        assert np.abs(base_lv - new_lv).max() <= 1e-12
        assert log_posterior_unnorm(spec, flipped, data, UNIT_GAUSSIAN) == pytest.approx(
            log_posterior_unnorm(spec, theta, data, UNIT_GAUSSIAN), abs=1e-10)

    def test_sign_flip_requires_odd_activation(self):
        spec = NetworkSpec(2, (3,), activation="relu")
        theta, _ = random_state(spec, 25)
        with pytest.raises(UnsupportedTransformError):
            tanh_sign_flip(spec, theta, 0, 0)

    def test_rescale_identity_at_one(self):
        spec = NetworkSpec(2, (3,), activation="relu")
        theta, _ = random_state(spec, 26)
        np.testing.assert_allclose(relu_rescale(spec, theta, 0, 1, 1.0).values, theta,
                                   atol=1e-15)

    def test_rescale_preserves_likelihood_changes_prior(self):
        spec = NetworkSpec(2, (4,), activation="relu")
        theta, data = random_state(spec, 27)
        scaled = relu_rescale(spec, theta, 0, 1, 2.0)
        assert log_likelihood(spec, scaled, data) == pytest.approx(
            log_likelihood(spec, theta, data), abs=1e-10)
        # closed-form comparison of the coordinate sums that changed
        before = log_prior(theta, UNIT_GAUSSIAN)
        after = log_prior(scaled.values, UNIT_GAUSSIAN)
        diff_oracle = -0.5 * (np.sum(scaled.values**2) - np.sum(theta**2))
        assert after - before == pytest.approx(diff_oracle, abs=1e-10)
        assert abs(after - before) > 1e-8

    def test_rescale_rejects_bad_inputs(self):
        spec = NetworkSpec(2, (3,), activation="tanh")
        theta, _ = random_state(spec, 28)
        with pytest.raises(UnsupportedTransformError):
            relu_rescale(spec, theta, 0, 0, 2.0)
        relu_spec = NetworkSpec(2, (3,), activation="relu")
        theta2, _ = random_state(relu_spec, 29)
        with pytest.raises(ValueError):
            relu_rescale(relu_spec, theta2, 0, 0, -1.0)


class TestInit:
    def test_preactivation_scale_reasonable(self):
        # normalized inputs keep first-layer pre-activations in a sane band
        for width in (8, 32, 64):
            spec = NetworkSpec(6, (width,))
            values = init_parameters(spec, RngStream(31).substream("w", width))
            X = RngStream(32).generator().normal(size=(500, 6))
            w, b = unflatten(spec, values)[0]
            pre = X @ w + b
            assert 0.3 <= pre.std() <= 3.0

    def test_biases_start_at_zero(self):
        spec = NetworkSpec(3, (4,))
        values = init_parameters(spec, RngStream(33))
        layout = layout_for(spec)
        for ls in layout.layers:
            np.testing.assert_array_equal(values[ls.bias], 0.0)
