import numpy as np
import pytest

from bnnkit.data import Dataset, RawTable, SplitSpec, normalize_split, synth_regression
from bnnkit.diagnostics import lppd
from bnnkit.errors import DivergedTrainingError
from bnnkit.network import NetworkSpec, forward_batch, layout_for
from bnnkit.numerics import RngStream
from bnnkit.training import (AdamConfig, AdamState, adam_step, de_predict,
                             train_ensemble, train_member, weight_decay_mask)


class TestAdamStep:
    def test_first_step_with_unit_gradient(self):
        cfg = AdamConfig(learning_rate=1e-2, weight_decay=0.0)
        theta = np.zeros(1)
        new, state = adam_step(theta, np.ones(1), AdamState.zeros(1), cfg)
        # bias-corrected first step: -lr * 1 / (1 + eps)
        assert new[0] == pytest.approx(-0.01 * (1.0 / (1.0 + 1e-8)), abs=1e-12)
        assert state.step == 1

    def test_zero_gradient_leaves_theta(self):
        cfg = AdamConfig(weight_decay=0.0)
        theta = np.array([1.0, -2.0])
        new, _ = adam_step(theta, np.zeros(2), AdamState.zeros(2), cfg)
        np.testing.assert_array_equal(new, theta)

    def test_update_is_odd_in_gradient(self):
        cfg = AdamConfig(weight_decay=0.0)
        gen = RngStream(1).generator()
        grads = gen.normal(size=(20, 3))
        theta_pos, state_pos = np.zeros(3), AdamState.zeros(3)
        theta_neg, state_neg = np.zeros(3), AdamState.zeros(3)
        for g in grads:
            theta_pos, state_pos = adam_step(theta_pos, g, state_pos, cfg)
            theta_neg, state_neg = adam_step(theta_neg, -g, state_neg, cfg)
        np.testing.assert_allclose(theta_pos, -theta_neg, atol=1e-12)

    def test_decay_mask_applied_decoupled(self):
        cfg = AdamConfig(learning_rate=0.1, weight_decay=0.5)
        theta = np.array([1.0, 1.0])
        mask = np.array([1.0, 0.0])
        new, _ = adam_step(theta, np.zeros(2), AdamState.zeros(2), cfg, mask)
        assert new[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)
        assert new[1] == 1.0

    def test_quadratic_convergence(self):
        # minimize (x - 3)^2 / 2
        cfg = AdamConfig(learning_rate=1e-2, weight_decay=0.0, epochs=5000)
        theta, state = np.zeros(1), AdamState.zeros(1)
        for _ in range(5000):
            theta, state = adam_step(theta, theta - 3.0, state, cfg)
        assert abs(theta[0] - 3.0) < 1e-3


class TestWeightDecayMask:
    def test_biases_excluded(self):
        spec = NetworkSpec(3, (4,))
        mask = weight_decay_mask(spec)
        layout = layout_for(spec)
        for ls in layout.layers:
            np.testing.assert_array_equal(mask[ls.weights], 1.0)
            np.testing.assert_array_equal(mask[ls.bias], 0.0)


class TestTrainMember:
    def test_fits_linear_data(self):
        gen = RngStream(2).generator()
        X = gen.uniform(-1, 1, size=(128, 1))
        data = Dataset(X=X, y=2.0 * X[:, 0])
        spec = NetworkSpec(1, (8,), activation="tanh")
        theta, trace = train_member(spec, data, AdamConfig(epochs=5000), RngStream(3))
        mu, _ = forward_batch(spec, theta, X)
        rmse = float(np.sqrt(np.mean((data.y - mu) ** 2)))
        assert rmse <= 0.05
        assert trace[-1] <= trace[0]

    def test_constant_target(self):
        gen = RngStream(4).generator()
        data = Dataset(X=gen.normal(size=(64, 2)), y=np.zeros(64))
        spec = NetworkSpec(2, (4,))
        theta, _ = train_member(spec, data, AdamConfig(epochs=2000), RngStream(5))
        mu, _ = forward_batch(spec, theta, data.X)
        assert float(np.sqrt(np.mean(mu**2))) <= 1e-2

    def test_deterministic_given_stream(self):
        gen = RngStream(6).generator()
        data = Dataset(X=gen.normal(size=(32, 2)), y=gen.normal(size=32))
        spec = NetworkSpec(2, (4,))
        cfg = AdamConfig(epochs=200)
        a, _ = train_member(spec, data, cfg, RngStream(7))
        b, _ = train_member(spec, data, cfg, RngStream(7))
        np.testing.assert_array_equal(a.values, b.values)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_carries_epoch(self):
        gen = RngStream(8).generator()
        data = Dataset(X=gen.normal(size=(16, 1)), y=gen.normal(size=16))
        spec = NetworkSpec(1, (4,))
        with pytest.raises(DivergedTrainingError) as err:
            train_member(spec, data, AdamConfig(learning_rate=1e12, epochs=500),
                         RngStream(9))
        assert err.value.epoch >= 0


class TestEnsemble:
    def _sine_train(self):
        ds, _ = synth_regression("sine", 200, 0.1, RngStream(10))
        table = RawTable.from_arrays(ds.X, ds.y)
        return normalize_split(table, SplitSpec(0.2, seed=10))

    def test_single_member_equals_member_substream_zero(self):
        train, _ = self._sine_train()
        spec = NetworkSpec(1, (8,))
        cfg = AdamConfig(epochs=300)
        rng = RngStream(11)
        ens = train_ensemble(spec, train, 1, cfg, rng)
        solo, _ = train_member(spec, train, cfg, rng.substream("member", 0))
        np.testing.assert_array_equal(ens.members[0].values, solo.values)

    def test_members_are_pairwise_distinct(self):
        train, _ = self._sine_train()
        spec = NetworkSpec(1, (8,), activation="tanh")
        ens = train_ensemble(spec, train, 12, AdamConfig(epochs=300), RngStream(12))
        for i in range(12):
            for j in range(i + 1, 12):
                dist = np.linalg.norm(ens.members[i].values - ens.members[j].values)
                assert dist > 0.0

    def test_ensemble_mean_not_much_worse_than_best_member(self):
        train, test = self._sine_train()
        spec = NetworkSpec(1, (16,), activation="tanh")
        ens = train_ensemble(spec, train, 4, AdamConfig(epochs=1500), RngStream(13))
        mixture = de_predict(spec, [m.values for m in ens.members], test.X)
        member_rmse = [mixture.for_chain(i).rmse(test.y) for i in range(4)]
        assert mixture.rmse(test.y) <= min(member_rmse) + 0.02


class TestDePredict:
    def test_single_member_is_its_own_mixture(self):
        spec = NetworkSpec(2, (4,))
        gen = RngStream(14).generator()
        theta = 0.3 * gen.normal(size=layout_for(spec).size)
        xs = gen.normal(size=(6, 2))
        mixture = de_predict(spec, [theta], xs)
        mu, log_var = forward_batch(spec, theta, xs)
        np.testing.assert_allclose(mixture.mus[0], mu, atol=1e-14)
        np.testing.assert_allclose(mixture.sigmas[0], np.exp(0.5 * log_var), atol=1e-14)

    def test_identical_members_collapse_to_member_mean(self):
        spec = NetworkSpec(2, (4,))
        gen = RngStream(15).generator()
        theta = 0.3 * gen.normal(size=layout_for(spec).size)
        xs = gen.normal(size=(5, 2))
        mixture = de_predict(spec, [theta, theta, theta], xs)
        mu, _ = forward_batch(spec, theta, xs)
        np.testing.assert_allclose(mixture.point_predictions(), mu, atol=1e-14)

    def test_two_component_mixture_moments(self):
        # components N(1, 1) and N(-1, 1): mean 0, variance 1 + 1 = 2
        from bnnkit.diagnostics import PredictiveMixture

        mixture = PredictiveMixture(
            mus=np.array([[1.0], [-1.0]]), sigmas=np.ones((2, 1)),
            chain_ids=np.array([0, 1]), sample_ids=np.zeros(2, dtype=int))
        draws_mean = mixture.point_predictions()[0]
        assert draws_mean == 0.0
        second_moment = np.mean(mixture.mus[:, 0] ** 2 + mixture.sigmas[:, 0] ** 2)
        assert second_moment - draws_mean**2 == pytest.approx(2.0, abs=1e-12)

    def test_mixture_lppd_worked_example(self):
        from bnnkit.diagnostics import PredictiveMixture

        mixture = PredictiveMixture(
            mus=np.array([[0.0], [2.0]]), sigmas=np.ones((2, 1)),
            chain_ids=np.array([0, 1]), sample_ids=np.zeros(2, dtype=int))
        assert lppd(mixture, np.array([1.0])) == pytest.approx(-1.4189385, abs=1e-6)
