import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tryon_iqa import tensor as T
from tryon_iqa.dataset import TripletSample
from tryon_iqa.errors import ConfigError, DataError
from tryon_iqa.objective import (PreferencePair, binary_entropy, enumerate_items, human_pref, items_loss,
                                 pref_prob, sample_pairs, soft_cross_entropy, unique_triplets)

scores = st.floats(-1.0, 1.0)
taus = st.floats(0.05, 5.0)


def sample(tid, anchor, score):
    return TripletSample(tid, anchor, anchor, "g", "p", tid, normalized_score=score)


@pytest.fixture
def anchored():
    return [sample("a0", "A", 0.5), sample("a1", "A", -0.5), sample("a2", "A", 0.0),
            sample("b0", "B", 0.2), sample("c0", "C", 0.9), sample("c1", "C", 0.1)]


class TestPreference:
    @settings(max_examples=200)
    @given(scores, scores, taus)
    def test_antisymmetry(self, a, b, tau):
        assert pref_prob(a, b, tau) + pref_prob(b, a, tau) == pytest.approx(1.0, abs=1e-12)

    def test_equal_scores_are_indifferent(self):
        assert pref_prob(0.3, 0.3, 0.5) == 0.5

    def test_tensor_and_float_agree(self):
        a, b = T.Tensor(np.array([0.4, -0.1])), T.Tensor(np.array([0.1, 0.6]))
        np.testing.assert_allclose(pref_prob(a, b, 0.5).data, pref_prob(a.data, b.data, 0.5), rtol=1e-14)

    def test_human_pref_matches_form(self):
        assert human_pref(0.6, 0.1, 0.5) == pytest.approx(1 / (1 + math.exp(-1.0)))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ConfigError):
            pref_prob(0.1, 0.2, tau)


class TestCrossEntropy:
    @settings(max_examples=200)
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(0.0, 1.0))
    def test_gibbs_inequality(self, p, q):
        assert soft_cross_entropy(p, q) >= binary_entropy(q) - 1e-12

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_hard_targets(self, p):
        assert soft_cross_entropy(p, 1.0) == pytest.approx(-math.log(p), rel=1e-12)
        assert soft_cross_entropy(p, 0.0) == pytest.approx(-math.log(1 - p), rel=1e-12)

    def test_equality_at_target(self):
        q = np.linspace(0.01, 0.99, 50)
        np.testing.assert_allclose(soft_cross_entropy(q, q), binary_entropy(q), rtol=1e-12)

    def test_clamped_log_is_finite(self):
        assert np.isfinite(soft_cross_entropy(0.0, 1.0))
        assert soft_cross_entropy(0.0, 1.0) == pytest.approx(-math.log(1e-12))

    def test_entropy_edges(self):
        np.testing.assert_array_equal(binary_entropy([0.0, 1.0]), [0.0, 0.0])
        assert binary_entropy(0.5) == pytest.approx(math.log(2))


class TestItems:
    def test_enumeration(self, anchored):
        items = enumerate_items(anchored)
        assert sum(it.is_pair for it in items) == 3 + 1
        singles = [it for it in items if not it.is_pair]
        assert [it.i.triplet_id for it in singles] == ["b0"]

    def test_pair_must_share_anchor(self, anchored):
        with pytest.raises(DataError):
            PreferencePair(("A", "A"), anchored[0], anchored[3])

    def test_swapped(self, anchored):
        pair = PreferencePair(anchored[0].anchor, anchored[0], anchored[1])
        assert pair.swapped().i is anchored[1]

    def test_sampling_deterministic(self, anchored):
        a = [(it.i.triplet_id, it.j and it.j.triplet_id) for it in sample_pairs(anchored, 3, 1)]
        b = [(it.i.triplet_id, it.j and it.j.triplet_id) for it in sample_pairs(anchored, 3, 1)]
        c = [(it.i.triplet_id, it.j and it.j.triplet_id) for it in sample_pairs(anchored, 3, 2)]
        assert a == b and sorted(a, key=str) == sorted(c, key=str)

    def test_empty_sampling(self):
        with pytest.raises(DataError):
            sample_pairs([], 0, 1)

    def test_unique_triplets(self, anchored):
        assert len(unique_triplets(enumerate_items(anchored))) == len(anchored)


class TestItemsLoss:
    def loss_by_hand(self, psi, samples, items, tau):
        total = 0.0
        for it in items:
            if it.is_pair:
                pi, pj = psi[it.i.triplet_id], psi[it.j.triplet_id]
                p = 1 / (1 + math.exp(-(pi - pj) / tau))
                q = 1 / (1 + math.exp(-(it.i.score - it.j.score) / tau))
                total += -q * math.log(p) - (1 - q) * math.log(1 - p)
                total += (pi - it.i.score) ** 2 + (pj - it.j.score) ** 2
            else:
                total += (psi[it.i.triplet_id] - it.i.score) ** 2
        return total / len(items)

    def test_matches_hand_computation(self, anchored, rng):
        items = enumerate_items(anchored)
        values = rng.uniform(-0.9, 0.9, len(anchored))
        index = {s.triplet_id: k for k, s in enumerate(anchored)}
        got = float(items_loss(T.Tensor(values), index, items, 0.5).data)
        want = self.loss_by_hand(dict(zip(index, values)), anchored, items, 0.5)
        assert got == pytest.approx(want, rel=1e-12)

    def test_singleton_is_regression_only(self):
        s = sample("x", "X", 0.4)
        loss = items_loss(T.Tensor(np.array([0.1])), {"x": 0}, [PreferencePair(s.anchor, s)], 0.5)
        assert float(loss.data) == pytest.approx(0.09)

    def test_swap_invariance(self, anchored, rng):
        items = [it for it in enumerate_items(anchored) if it.is_pair]
        values = T.Tensor(rng.uniform(-1, 1, len(anchored)))
        index = {s.triplet_id: k for k, s in enumerate(anchored)}
        a = float(items_loss(values, index, items, 0.7).data)
        b = float(items_loss(values, index, [it.swapped() for it in items], 0.7).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient(self, anchored, rng):
        items = enumerate_items(anchored)
        values = T.Tensor(rng.uniform(-0.9, 0.9, len(anchored)), requires_grad=True)
        index = {s.triplet_id: k for k, s in enumerate(anchored)}
        err = T.grad_check(lambda: items_loss(values, index, items, 0.5), [values], step=1e-6)
        assert err < 1e-6

    def test_minimised_by_human_scores(self, anchored):
        items = enumerate_items(anchored)
        index = {s.triplet_id: k for k, s in enumerate(anchored)}
        exact = np.array([s.score for s in anchored])
        best = float(items_loss(T.Tensor(exact), index, items, 0.5).data)
        worse = float(items_loss(T.Tensor(exact + 0.05), index, items, 0.5).data)
        assert best < worse
