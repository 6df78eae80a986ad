import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionvote import ensemble
from fusionvote.errors import ConfigurationError, InputError
from fusionvote.trainer import evaluate_predictions
from oracles import TABLE3_OUTPUTS, TABLE3_T2V


def brute_force_votes(logits, alpha, beta):
    """Top class gets alpha, runner-up beta, found by scanning (ties to lower index)."""
    z = list(logits)
    first = max(range(len(z)), key=lambda i: (z[i], -i))
    rest = [i for i in range(len(z)) if i != first]
    second = max(rest, key=lambda i: (z[i], -i))
    v = np.zeros(len(z))
    v[first], v[second] = alpha, beta
    return v


outputs_strategy = st.integers(2, 7).flatmap(
    lambda C: st.integers(1, 6).flatmap(
        lambda M: arrays(np.float64, (M, C), elements=st.floats(-20, 20, width=32))))


class TestRankVector:
    def test_sort_oracle(self):
        np.testing.assert_array_equal(ensemble.rank_vector([3.0, 1.0, 2.0]), [2, 0, 1])

    def test_increasing(self):
        np.testing.assert_array_equal(ensemble.rank_vector(np.arange(6.0)), np.arange(6))

    def test_ties(self):
        np.testing.assert_array_equal(ensemble.rank_vector(np.zeros(5)), [4, 3, 2, 1, 0])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 9), elements=st.floats(-5, 5)))
    def test_is_permutation(self, z):
        assert sorted(ensemble.rank_vector(z)) == list(range(len(z)))


class TestVoteVector:
    def test_table3_first_row(self):
        S = ensemble.rank_vector(TABLE3_OUTPUTS[0])
        np.testing.assert_allclose(ensemble.t2v_label_vector(S, 1.9, 1.0), [1.0, 0, 0, 1.9, 0, 0, 0])

    def test_equal_weights(self):
        v = ensemble.t2v_label_vector(ensemble.rank_vector([0.1, 0.9, 0.5]), 1.0, 1.0)
        np.testing.assert_array_equal(v, [0.0, 1.0, 1.0])

    @pytest.mark.parametrize("C", range(2, 9))
    def test_forms_agree_on_every_permutation(self, C):
        S = np.array(list(itertools.permutations(range(C))))
        np.testing.assert_array_equal(ensemble.t2v_votes_fast(S, 1.9, 1.0), ensemble.t2v_votes_direct(S, 1.9, 1.0))

    def test_c4_matches_brute_force(self):
        for perm in itertools.permutations(range(4)):
            logits = np.array(perm, dtype=float)
            np.testing.assert_allclose(ensemble.t2v_label_vector(ensemble.rank_vector(logits)),
                                       brute_force_votes(logits, 1.9, 1.0), atol=1e-15)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            ensemble.t2v_label_vector(np.array([0]))


class TestT2V:
    def test_table3(self):
        d = ensemble.t2v(TABLE3_OUTPUTS, 1.9, 1.0)
        np.testing.assert_allclose(d.aggregate, TABLE3_T2V, atol=1e-9)
        assert d.predicted == 0

    def test_single_voter(self):
        z = np.array([[0.2, 1.3, -0.4]])
        assert ensemble.t2v(z).predicted == 1

    def test_replication(self):
        z = np.array([0.2, 1.3, -0.4, 0.9])
        one = ensemble.t2v(z[None])
        many = ensemble.t2v(np.tile(z, (5, 1)))
        np.testing.assert_allclose(many.aggregate, 5 * one.aggregate)
        assert many.predicted == one.predicted

    def test_dataset_shape(self):
        logits = np.random.default_rng(0).normal(size=(4, 30, 5))
        d = ensemble.t2v(logits)
        assert d.aggregate.shape == (30, 5) and d.predicted.shape == (30,)
        for n in range(30):
            assert d.predicted[n] == ensemble.t2v(logits[:, n]).predicted

    def test_ragged(self):
        with pytest.raises(InputError):
            ensemble.t2v([[0.1, 0.2], [0.1, 0.2, 0.3]])

    def test_non_finite(self):
        with pytest.raises(InputError):
            ensemble.t2v([[0.1, np.nan]])

    @settings(max_examples=150, deadline=None)
    @given(outputs_strategy, st.data())
    def test_properties(self, z, data):
        M, C = z.shape
        d = ensemble.t2v(z)
        assert d.aggregate.shape == (C,)
        assert np.all(d.aggregate >= 0) and np.all(d.aggregate <= M * 1.9 + 1e-12)
        assert np.count_nonzero(d.aggregate) <= 2 * M
        perm = data.draw(st.permutations(range(M)))
        np.testing.assert_allclose(ensemble.t2v(z[list(perm)]).aggregate, d.aggregate)
        scale = data.draw(st.floats(0.01, 100))
        scaled = z.copy()
        scaled[0] *= scale
        np.testing.assert_array_equal(ensemble.rank_vector(scaled[0]), ensemble.rank_vector(z[0]))
        assert ensemble.t2v(scaled).predicted == d.predicted
        assert ensemble.top1_vote(scaled).predicted == ensemble.top1_vote(z).predicted


class TestTop1:
    def test_table3(self):
        d = ensemble.top1_vote(TABLE3_OUTPUTS)
        np.testing.assert_array_equal(d.aggregate, [3, 0, 0, 3, 0, 0, 0])
        assert d.predicted == 0

    def test_unanimous(self):
        z = np.tile([0.0, 2.0, 1.0], (4, 1))
        d = ensemble.top1_vote(z)
        np.testing.assert_array_equal(d.aggregate, [0, 4, 0])

    def test_single_voter(self):
        assert ensemble.top1_vote([[0.0, -1.0, 3.0]]).predicted == 2

    @settings(max_examples=80, deadline=None)
    @given(outputs_strategy, st.data())
    def test_permutation_invariant(self, z, data):
        perm = data.draw(st.permutations(range(len(z))))
        np.testing.assert_array_equal(ensemble.top1_vote(z[list(perm)]).aggregate, ensemble.top1_vote(z).aggregate)


class TestNOI:
    def test_table3_high_precision(self):
        mpmath.mp.dps = 40
        expected = np.zeros(7)
        for row in TABLE3_OUTPUTS:
            e = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
            s = sum(e)
            expected += [float(v / s) for v in e]
        np.testing.assert_allclose(ensemble.noi(TABLE3_OUTPUTS).aggregate, expected, atol=1e-9)

    def test_symmetric_tie(self):
        d = ensemble.noi([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(d.aggregate, [1.0, 1.0])
        assert d.predicted == 0

    def test_single_voter(self):
        assert ensemble.noi([[0.3, 2.0, 1.9]]).predicted == 1

    def test_not_scale_invariant(self):
        # one very confident network outweighs two mild ones under NOI but not under T2V
        z = np.array([[0.0, 0.1, -5.0], [0.0, 0.1, -5.0], [8.0, 0.0, -5.0]])
        assert ensemble.noi(z).predicted == 0
        assert ensemble.t2v(z).predicted == 1


class TestCombine:
    @pytest.mark.parametrize("strategy", ensemble.STRATEGIES)
    def test_dispatch(self, strategy):
        assert ensemble.combine(strategy, TABLE3_OUTPUTS).strategy == strategy

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            ensemble.combine("bagging", TABLE3_OUTPUTS)


class TestRankDistribution:
    def test_perfect(self):
        logits = np.eye(4)[[0, 1, 2, 3, 1]]
        np.testing.assert_array_equal(ensemble.rank_distribution(logits, [0, 1, 2, 3, 1]), [1, 0, 0, 0])

    def test_worst(self):
        labels = np.array([0, 1, 2])
        logits = -np.eye(3)[labels]
        np.testing.assert_array_equal(ensemble.rank_distribution(logits, labels), [0, 0, 1])

    def test_positions(self):
        np.testing.assert_array_equal(ensemble.label_positions([[0.1, 0.5, 0.3]], [0]), [3])

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            ensemble.rank_distribution(np.zeros((2, 3)), [0, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 7).flatmap(lambda C: st.tuples(
        arrays(np.float64, (20, C), elements=st.floats(-3, 3, width=16)),
        arrays(np.int64, 20, elements=st.integers(0, C - 1)))))
    def test_rank1_is_accuracy(self, case):
        logits, labels = case
        dist = ensemble.rank_distribution(logits, labels)
        acc = evaluate_predictions(logits.argmax(axis=1), labels, logits.shape[1]).accuracy
        assert dist[0] == acc
        assert abs(dist.sum() - 1) < 1e-9
