import numpy as np
import pytest

from sgrnn.models import SentenceClassifier
from sgrnn.numerics import SeededRng
from sgrnn.posterior import (
    AveragingStrategy,
    CollectionPolicy,
    SampleBank,
    ensemble_predict,
    map_predict,
    maybe_collect,
    predictive_stats,
    select,
)


def replay_schedule(total_epochs, burn_in, thinning, checks_per_epoch=2):
    """Simulate a training run checking the bank checks_per_epoch times per epoch."""
    bank = SampleBank()
    policy = CollectionPolicy(burn_in_epochs=burn_in, thinning_interval_epochs=thinning)
    theta = np.zeros(3)
    n_checks = total_epochs * checks_per_epoch
    for k in range(1, n_checks + 1):
        maybe_collect(bank, policy, k / checks_per_epoch, theta)
    return bank


class TestCollectionSchedule:
    # (epochs, burn_in, thinning) -> expected snapshot count
    @pytest.mark.parametrize(
        "epochs,burn_in,thinning,expected",
        [
            (20, 4.0, 0.5, 32),  # char-level novel schedule
            (40, 4.0, 0.5, 72),  # word-level treebank schedule
            (20, 1.0, 1.0, 19),  # sentence-classification schedule
            (20, 3.0, 1.0, 17),
            (20, 3.0, 0.5, 34),
        ],
    )
    def test_schedule_counts(self, epochs, burn_in, thinning, expected):
        assert len(replay_schedule(epochs, burn_in, thinning)) == expected

    def test_counts_insensitive_to_check_density(self):
        for checks in (2, 4, 10, 97):
            assert len(replay_schedule(20, 4.0, 0.5, checks_per_epoch=checks)) == 32

    def test_burn_in_longer_than_run_gives_empty_bank(self):
        assert len(replay_schedule(20, 20.0, 0.5)) == 0

    def test_first_collection_is_one_interval_past_burn_in(self):
        bank = replay_schedule(20, 4.0, 0.5)
        assert bank.stamps[0] == pytest.approx(4.5)
        assert bank.stamps[-1] == pytest.approx(20.0)

    def test_zero_thinning_collects_every_check_past_burn_in(self):
        bank = replay_schedule(4, 2.0, 0.0)
        assert len(bank) == 5  # checks at 2.0, 2.5, ..., 4.0

    def test_nondecreasing_fraction_enforced(self):
        bank = SampleBank()
        policy = CollectionPolicy(0.0, 1.0)
        maybe_collect(bank, policy, 2.0, np.zeros(2))
        with pytest.raises(ValueError):
            maybe_collect(bank, policy, 1.0, np.zeros(2))

    def test_snapshot_shape_must_match_bank(self):
        bank = SampleBank()
        policy = CollectionPolicy(0.0, 1.0)
        maybe_collect(bank, policy, 1.0, np.zeros(4))
        with pytest.raises(ValueError):
            maybe_collect(bank, policy, 2.0, np.zeros(5))

    def test_snapshots_are_deep_copies(self):
        bank = SampleBank()
        theta = np.zeros(3)
        maybe_collect(bank, CollectionPolicy(0.0, 1.0), 1.0, theta)
        theta[:] = 99.0
        assert np.all(bank.load(0) == 0.0)

    def test_meta_roundtrip_continues_schedule(self):
        bank = SampleBank()
        policy = CollectionPolicy(1.0, 1.0)
        for k in range(1, 11):
            maybe_collect(bank, policy, k / 2, np.zeros(2))
        meta = bank.meta()
        resumed = SampleBank(bank.store)
        resumed.restore_meta(meta)
        for k in range(11, 41):
            maybe_collect(resumed, policy, k / 2, np.zeros(2))
        assert len(resumed) == 19  # matches one uninterrupted 20-epoch run


class TestSelect:
    def _bank(self, K):
        bank = SampleBank()
        for i in range(K):
            bank.append(float(i + 1), np.full(2, float(i)))
        return bank

    def test_thinned_convention(self):
        bank = self._bank(6)
        chosen = select(bank, AveragingStrategy("thinned", 3))
        assert [int(c[0]) for c in chosen] == [1, 3, 5]  # 1-based indices 2, 4, 6

    def test_s_equals_k_returns_whole_bank_for_every_strategy(self):
        bank = self._bank(5)
        for kind in ("forward", "backward", "thinned"):
            chosen = select(bank, AveragingStrategy(kind, 5))
            assert [int(c[0]) for c in chosen] == [0, 1, 2, 3, 4]

    def test_forward_and_backward_windows(self):
        bank = self._bank(60)
        fwd = select(bank, AveragingStrategy("forward", 20))
        bwd = select(bank, AveragingStrategy("backward", 20))
        assert [int(c[0]) for c in fwd] == list(range(20))
        assert [int(c[0]) for c in bwd] == list(range(40, 60))

    def test_s_larger_than_bank_rejected(self):
        with pytest.raises(ValueError):
            select(self._bank(3), AveragingStrategy("forward", 4))

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            select(SampleBank(), AveragingStrategy("forward", 1))


def _fixed_prob_classifier(log_probs_per_sample):
    """Classifier whose predictions are exactly softmax(b_dec); one sample per row."""
    rng = SeededRng(77)
    model = SentenceClassifier.build(4, len(log_probs_per_sample[0]), "vanilla", 2, 1, rng, bidirectional=False)
    samples = []
    for logp in log_probs_per_sample:
        flat = model.get_flat()
        vec = flat.values.copy()
        vec[:] = 0.0
        off = dict(zip(flat.index.names, flat.index.offsets))["decoder.b"]
        vec[off : off + len(logp)] = np.log(logp)
        samples.append(vec)
    return model, samples


class TestEnsemblePredict:
    def test_single_sample_is_identity(self):
        model, samples = _fixed_prob_classifier([[0.2, 0.8]])
        single = map_predict(model, samples[0], np.array([1, 2]))
        avg, per = ensemble_predict(model, samples, np.array([1, 2]))
        assert np.array_equal(avg, single)
        assert per.shape == (1, 2)

    def test_two_sample_arithmetic_mean(self):
        model, samples = _fixed_prob_classifier([[0.2, 0.8], [0.6, 0.4]])
        avg, per = ensemble_predict(model, samples, np.array([1, 2, 3]))
        assert np.allclose(per[0], [0.2, 0.8], atol=1e-12)
        assert np.allclose(per[1], [0.6, 0.4], atol=1e-12)
        assert np.allclose(avg, [0.4, 0.6], atol=1e-12)

    def test_average_rows_sum_to_one(self):
        rng = SeededRng(5)
        model = SentenceClassifier.build(6, 3, "lstm", 4, 1, rng)
        samples = [model.get_flat().values + SeededRng(i).gaussian(1, model.index.size, std=0.05)[0] for i in range(4)]
        avg, _ = ensemble_predict(model, samples, np.array([1, 4, 2]))
        assert avg.sum() == pytest.approx(1.0, abs=1e-12)

    def test_permutation_invariance(self):
        model, samples = _fixed_prob_classifier([[0.1, 0.9], [0.5, 0.5], [0.7, 0.3]])
        a, _ = ensemble_predict(model, samples, np.array([1]))
        b, _ = ensemble_predict(model, samples[::-1], np.array([1]))
        assert np.allclose(a, b, atol=1e-15)

    def test_average_is_convex_combination(self):
        model, samples = _fixed_prob_classifier([[0.1, 0.9], [0.5, 0.5], [0.7, 0.3]])
        avg, per = ensemble_predict(model, samples, np.array([2]))
        assert np.all(avg >= per.min(axis=0) - 1e-15)
        assert np.all(avg <= per.max(axis=0) + 1e-15)

    def test_template_parameters_restored(self):
        model, samples = _fixed_prob_classifier([[0.2, 0.8]])
        before = model.get_flat().values.copy()
        ensemble_predict(model, samples, np.array([1]))
        assert np.array_equal(model.get_flat().values, before)

    def test_ensemble_nll_never_worse_than_mean_sample_nll(self):
        # Jensen: -log(mean p) <= mean(-log p)
        model, samples = _fixed_prob_classifier([[0.2, 0.8], [0.6, 0.4], [0.35, 0.65]])
        avg, per = ensemble_predict(model, samples, np.array([1, 2]))
        label = 0
        ens = -np.log(avg[label])
        mean_single = float(np.mean(-np.log(per[:, label])))
        assert ens <= mean_single + 1e-12

    def test_empty_sample_list_rejected(self):
        model, _ = _fixed_prob_classifier([[0.5, 0.5]])
        with pytest.raises(ValueError):
            ensemble_predict(model, [], np.array([1]))


class TestMapPredict:
    def test_deterministic_across_calls(self):
        model, samples = _fixed_prob_classifier([[0.3, 0.7]])
        a = map_predict(model, samples[0], np.array([1, 3]))
        b = map_predict(model, samples[0], np.array([1, 3]))
        assert np.array_equal(a, b)

    def test_equals_single_sample_ensemble(self):
        model, samples = _fixed_prob_classifier([[0.25, 0.75]])
        avg, _ = ensemble_predict(model, samples, np.array([2]))
        assert np.array_equal(map_predict(model, samples[0], np.array([2])), avg)


class TestPredictiveStats:
    def test_identical_samples_zero_std(self):
        probs = np.tile([0.3, 0.7], (5, 1))
        mean, std = predictive_stats(probs)
        assert np.allclose(mean, [0.3, 0.7])
        assert np.all(std == 0.0)

    def test_two_point_formula(self):
        mean, std = predictive_stats(np.array([[0.2], [0.6]]))
        assert mean[0] == pytest.approx(0.4)
        assert std[0] == pytest.approx(0.2)

    def test_matches_direct_recomputation(self):
        rng = SeededRng(13)
        probs = rng.uniform(20 * 5).reshape(20, 5)
        probs /= probs.sum(axis=1, keepdims=True)
        mean, std = predictive_stats(probs)
        for j in range(5):
            col = probs[:, j]
            m = col.sum() / 20
            assert mean[j] == pytest.approx(m, abs=1e-12)
            assert std[j] == pytest.approx(np.sqrt(((col - m) ** 2).sum() / 20), abs=1e-12)
