import itertools

import numpy as np
import pytest

from sgrnn.models import SentenceClassifier, classifier_loss_and_grad
from sgrnn.numerics import SeededRng
from sgrnn.samplers import (
    GradEstimate,
    HyperParams,
    SamplerState,
    apply_update,
    apply_weight_noise,
    posterior_grad,
    prewarm,
    psgld_step,
    rmsprop_step,
    sgd_step,
    sgld_step,
)


def hp_with(**kw):
    base = dict(step_size=1e-3, minibatch_size=1, dataset_size=10)
    base.update(kw)
    return HyperParams(**base)


class TestHyperParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            hp_with(step_size=0.0)
        with pytest.raises(ValueError):
            hp_with(beta1=1.0)
        with pytest.raises(ValueError):
            hp_with(lam=0.0)
        with pytest.raises(ValueError):
            hp_with(prior_variance=-1.0)
        with pytest.raises(ValueError):
            hp_with(minibatch_size=20, dataset_size=10)

    def test_constant_schedule(self):
        hp = hp_with(step_size=0.5)
        assert hp.step_size_at(0) == hp.step_size_at(1000) == 0.5

    def test_polynomial_decay(self):
        hp = hp_with(step_size=1.0, decay_a=2.0, decay_b=1.0, decay_gamma=0.5)
        assert hp.step_size_at(0) == pytest.approx(2.0)
        assert hp.step_size_at(3) == pytest.approx(1.0)


class TestPosteriorGrad:
    def test_prior_gradient_alone(self):
        theta = np.full(4, 2.0)
        hp = hp_with(prior_variance=1.0, dataset_size=10)
        g = posterior_grad(np.zeros(4), theta, hp, batch_size_actual=10)
        assert np.allclose(g.grad, 2.0)

    def test_vanishing_prior_full_batch_is_plain_gradient(self):
        theta = np.array([1.0, -2.0, 3.0])
        raw = np.array([0.5, 0.25, -1.0])
        hp = hp_with(prior_variance=np.inf, dataset_size=10, minibatch_size=10)
        g = posterior_grad(raw, theta, hp, batch_size_actual=10)
        assert np.array_equal(g.grad, raw)

    def test_exhaustive_subsets_average_to_full_batch(self):
        # six labelled sentences; all C(6,2) = 15 two-example minibatches
        rng = SeededRng(31)
        model = SentenceClassifier.build(5, 3, "vanilla", 3, 1, rng, embed_dim=3, bidirectional=False)
        examples = [
            (0, np.array([1, 2])),
            (1, np.array([3, 1, 4])),
            (2, np.array([2])),
            (0, np.array([4, 4, 1])),
            (1, np.array([0, 2, 3])),
            (2, np.array([1, 3])),
        ]
        theta = model.get_flat().values
        per_example = [classifier_loss_and_grad(model, ids, lab).grads.values for lab, ids in examples]
        hp = hp_with(dataset_size=6, minibatch_size=2, prior_variance=2.0)
        full = posterior_grad(sum(per_example), theta, hp, batch_size_actual=6)
        subset_grads = [
            posterior_grad(per_example[i] + per_example[j], theta, hp, batch_size_actual=2).grad
            for i, j in itertools.combinations(range(6), 2)
        ]
        mean_grad = np.mean(subset_grads, axis=0)
        assert np.max(np.abs(mean_grad - full.grad)) < 1e-10

    def test_clip_applies_to_likelihood_term_before_scaling(self):
        theta = np.zeros(2)
        raw = np.array([3.0, 4.0])  # norm 5
        hp = hp_with(dataset_size=10, minibatch_size=2, clip_norm=1.0)
        g = posterior_grad(raw, theta, hp, batch_size_actual=2)
        assert np.allclose(g.grad, (10 / 2) * raw / 5.0)

    def test_nonfinite_rejected(self):
        hp = hp_with()
        with pytest.raises(FloatingPointError):
            posterior_grad(np.array([np.nan]), np.zeros(1), hp, 1)

    def test_records_minibatch_indices(self):
        hp = hp_with()
        g = posterior_grad(np.zeros(3), np.zeros(3), hp, 2, indices=[4, 7])
        assert g.indices.tolist() == [4, 7]


class TestSgd:
    def test_zero_gradient_is_identity(self):
        theta = np.array([1.0, 2.0])
        assert np.array_equal(sgd_step(theta, np.zeros(2), 0.1), theta)

    def test_substitution(self):
        assert sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == pytest.approx(0.8)

    def test_matches_scripted_rule_on_random_vectors(self, rng):
        theta, g = rng.gaussian(1, 50)[0], rng.gaussian(1, 50)[0]
        eta = 0.037
        assert np.max(np.abs(sgd_step(theta, g, eta) - (theta - eta * g))) < 1e-15

    def test_accepts_grad_estimate(self):
        out = sgd_step(np.ones(2), GradEstimate(grad=np.ones(2)), 0.5)
        assert np.allclose(out, 0.5)


class TestSgld:
    def test_pure_noise_variance_is_two_eta(self):
        eta = 0.05
        theta = np.zeros(100000)
        out = sgld_step(theta, np.zeros_like(theta), eta, SeededRng(17))
        assert abs(out.var() - 2 * eta) / (2 * eta) < 0.05

    def test_scripted_update_with_pinned_noise(self):
        # theta - eta*g + sqrt(2 eta) * xi with xi = 0.3
        assert 1.0 - 0.1 * 2.0 + np.sqrt(0.2) * 0.3 == pytest.approx(0.93416, abs=1e-5)
        rng = SeededRng(23)
        xi = SeededRng(23).normal(3)
        out = sgld_step(np.ones(3), np.full(3, 2.0), 0.1, rng)
        expected = 1.0 - 0.2 + np.sqrt(0.2) * xi
        assert np.max(np.abs(out - expected)) < 1e-10

    def test_vanishing_step_size_is_continuous(self):
        theta = np.ones(4)
        g = np.full(4, 3.0)
        for eta in (1e-4, 1e-8, 1e-12):
            out = sgld_step(theta, g, eta, SeededRng(5))
            assert np.max(np.abs(out - theta)) < 10 * np.sqrt(2 * eta)

    def test_nonpositive_eta_rejected(self):
        with pytest.raises(ValueError):
            sgld_step(np.zeros(1), np.zeros(1), 0.0, SeededRng(1))


class TestRmsprop:
    def test_zero_gradient_zero_state_is_identity(self):
        theta = np.array([1.0, -1.0])
        out, state = rmsprop_step(theta, np.zeros(2), SamplerState.zeros(2), hp_with())
        assert np.array_equal(out, theta)
        assert state.step_counter == 1

    def test_v_update_substitution(self):
        _, state = rmsprop_step(np.zeros(2), np.array([3.0, 4.0]), SamplerState.zeros(2), hp_with(beta1=0.99))
        assert np.allclose(state.v, [0.09, 0.16])

    def test_constant_gradient_step_magnitude_approaches_eta(self):
        hp = hp_with(step_size=1e-3, beta1=0.9)
        theta = np.zeros(1)
        state = SamplerState.zeros(1)
        g = np.array([7.0])
        for _ in range(300):
            new_theta, state = rmsprop_step(theta, g, state, hp)
            step = theta - new_theta
            theta = new_theta
        assert step[0] == pytest.approx(hp.step_size, rel=1e-3)


class TestPsgld:
    def test_single_step_worked_example(self):
        hp = hp_with(step_size=1e-3, beta1=0.99, lam=1e-8)
        theta = np.zeros(2)
        g = np.array([3.0, 4.0])
        drift, state = psgld_step(theta, g, SamplerState.zeros(2), hp, rng=None)
        assert np.allclose(state.v, [0.09, 0.16])
        ginv = 1.0 / (1e-8 + np.sqrt(state.v))
        assert np.allclose(ginv, [3.3333, 2.5000], atol=1e-3)
        assert np.allclose(theta - drift, [0.005, 0.005], atol=1e-10)
        noise_std = np.sqrt(hp.step_size * ginv)
        assert np.allclose(noise_std, [0.05774, 0.05000], atol=1e-4)
        # full scripted oracle with the pinned noise stream
        xi = SeededRng(40).normal(2)
        out, _ = psgld_step(theta, g, SamplerState.zeros(2), hp, SeededRng(40))
        expected = theta - 0.5 * hp.step_size * ginv * g + np.sqrt(hp.step_size * ginv) * xi
        assert np.max(np.abs(out - expected)) < 1e-10

    def test_identity_preconditioner_reproduces_sgld_bitwise(self):
        eta = 4e-3
        hp = hp_with(step_size=eta)
        rng_a, rng_b = SeededRng(91), SeededRng(91)
        theta_a = theta_b = np.linspace(-1, 1, 11)
        state = SamplerState.zeros(11)
        g = SeededRng(3).gaussian(1, 11)[0]
        for _ in range(5):
            theta_a, state = psgld_step(theta_a, g, state, hp, rng_a, identity_preconditioner=True)
            theta_b = sgld_step(theta_b, g, eta / 2.0, rng_b)
            assert np.array_equal(theta_a, theta_b)

    def test_cold_start_noise_variance_is_eta_over_lam(self):
        hp = hp_with(step_size=1e-3, lam=1e-8)
        theta = np.zeros(3)
        xi = SeededRng(55).normal(3)
        out, _ = psgld_step(theta, np.zeros(3), SamplerState.zeros(3), hp, SeededRng(55))
        assert np.allclose(out, np.sqrt(hp.step_size / hp.lam) * xi, rtol=1e-12)

    def test_prewarm_accumulates_once_without_moving_theta(self):
        hp = hp_with(beta1=0.99)
        state = prewarm(SamplerState.zeros(2), np.array([3.0, 4.0]), hp)
        assert np.allclose(state.v, [0.09, 0.16])
        assert state.step_counter == 0

    def test_drift_is_half_of_rmsprop_step(self):
        hp = hp_with(step_size=2e-3, beta1=0.95, lam=1e-6)
        theta = SeededRng(8).gaussian(1, 20)[0]
        g = SeededRng(9).gaussian(1, 20)[0]
        state = SamplerState(v=np.abs(SeededRng(10).gaussian(1, 20)[0]), step_counter=4)
        rms_theta, _ = rmsprop_step(theta, g, state.copy(), hp)
        ps_theta, _ = psgld_step(theta, g, state.copy(), hp, rng=None)
        assert np.allclose(ps_theta - theta, 0.5 * (rms_theta - theta), rtol=1e-12)

    def test_permuting_coordinates_permutes_outputs(self):
        hp = hp_with()
        perm = SeededRng(2).permutation(16)
        theta = SeededRng(3).gaussian(1, 16)[0]
        g = SeededRng(4).gaussian(1, 16)[0]
        v = np.abs(SeededRng(5).gaussian(1, 16)[0])
        out, new_state = psgld_step(theta, g, SamplerState(v=v), hp, rng=None)
        out_p, state_p = psgld_step(theta[perm], g[perm], SamplerState(v=v[perm]), hp, rng=None)
        assert np.array_equal(out[perm], out_p)
        assert np.array_equal(new_state.v[perm], state_p.v)


class TestWeightNoise:
    def test_binary_keep_prob_one_is_identity(self):
        theta = np.linspace(-1, 1, 9)
        wn = apply_weight_noise(theta, "dropconnect-binary", 1.0, SeededRng(1))
        assert np.array_equal(wn.theta_noisy, theta)

    def test_gaussian_multiplier_centred_at_one(self):
        theta = np.ones(100000)
        wn = apply_weight_noise(theta, "dropconnect-gaussian", 0.5, SeededRng(6))
        # keep_prob 0.5 gives multiplier ~ N(1, 1)
        assert abs(wn.multiplier.mean() - 1.0) < 0.01
        assert abs(wn.multiplier.std() - 1.0) < 0.02
        assert abs((wn.theta_noisy / theta).mean() - 1.0) < 0.01

    def test_additive_noise_identity(self, rng):
        # xi0*theta - (eta/2)g  ==  theta - (eta/2)g + xi0'  with xi0' = (xi0-1)*theta
        theta = rng.gaussian(1, 64)[0]
        g = rng.gaussian(1, 64)[0]
        eta = 1e-2
        wn = apply_weight_noise(theta, "dropconnect-gaussian", 0.3, SeededRng(12))
        lhs = wn.theta_noisy - 0.5 * eta * g
        rhs = theta - 0.5 * eta * g + (wn.multiplier - 1.0) * theta
        assert np.max(np.abs(lhs - rhs)) < 1e-15

    def test_chain_grads_applies_mask(self):
        theta = np.ones(8)
        wn = apply_weight_noise(theta, "dropconnect-binary", 0.5, SeededRng(3))
        grads = np.full(8, 2.0)
        assert np.array_equal(wn.chain_grads(grads), 2.0 * wn.multiplier)

    def test_gaussian_requires_open_interval(self):
        with pytest.raises(ValueError):
            apply_weight_noise(np.ones(2), "dropconnect-gaussian", 1.0, SeededRng(1))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            apply_weight_noise(np.ones(2), "dropout", 0.5, SeededRng(1))


class TestApplyUpdate:
    def test_dispatch_covers_all_algorithms(self):
        theta = np.ones(3)
        g = np.full(3, 0.5)
        hp = hp_with()
        for alg in ("sgd", "rmsprop", "sgld", "psgld"):
            out, state = apply_update(alg, theta, g, SamplerState.zeros(3), hp, SeededRng(2))
            assert out.shape == theta.shape
            assert state.step_counter == 1

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ValueError):
            apply_update("adam", np.ones(1), np.ones(1), SamplerState.zeros(1), hp_with(), None)

    def test_sgd_and_sgld_without_noise_agree(self):
        theta = np.linspace(0, 1, 5)
        g = np.full(5, 0.2)
        hp = hp_with(step_size=0.01)
        a, _ = apply_update("sgd", theta, g, SamplerState.zeros(5), hp, None)
        b = sgld_step(theta, g, 0.01, rng=None)
        assert np.array_equal(a, b)
