import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from neuboots import weights as W
from neuboots.errors import ShapeError


def test_s_equal_one_is_always_one(rng):
    for _ in range(5):
        assert W.sample_dirichlet_alpha(1, rng).alpha.tolist() == [1.0]
        assert W.sample_multinomial_alpha(1, rng).alpha.tolist() == [1.0]


@given(S=st.integers(1, 500), seed=st.integers(0, 2**32 - 1))
def test_dirichlet_sums_to_s_and_is_positive(S, seed):
    a = W.sample_dirichlet_alpha(S, W.make_rng(seed)).alpha
    assert abs(a.sum() - S) <= 1e-9
    assert a.min() > 0


@given(S=st.integers(1, 500), seed=st.integers(0, 2**32 - 1))
def test_multinomial_integer_counts_sum_to_s(S, seed):
    a = W.sample_multinomial_alpha(S, W.make_rng(seed)).alpha
    assert np.all(a == np.round(a)) and a.min() >= 0
    assert a.sum() == S


def test_dirichlet_moments_at_s_100(rng):
    S = 100
    a = W.sample_dirichlet_alpha(S, rng, size=100_000).alpha
    # S * Beta(1, S-1): mean 1, E(a - 1)^2 = (S - 1) / (S + 1)
    assert np.all(np.abs(a.mean(axis=0) - 1) <= 0.02)
    assert abs(np.mean((a - 1) ** 2) - (S - 1) / (S + 1)) <= 0.02


def test_first_and_last_coordinates_exchangeable(rng):
    a = W.sample_dirichlet_alpha(50, rng, size=100_000).alpha
    assert stats.ks_2samp(a[:, 0], a[:, -1]).pvalue > 0.01


def test_exponential_tail(rng):
    # pooled over coordinates, which share one marginal
    S, delta = 200, 0.2
    hits = np.zeros(9)
    total = 0
    for _ in range(10):
        a = W.sample_dirichlet_alpha(S, rng, size=10_000).alpha.ravel()
        hits += [(a >= t).sum() for t in range(2, 11)]
        total += a.size
    for t, h in zip(range(2, 11), hits):
        assert h / total <= math.exp(-t + delta)


def test_multinomial_zero_cell_fraction(rng):
    S = 200
    a = W.sample_multinomial_alpha(S, rng, size=20_000).alpha
    assert abs(np.mean(a == 0) - (1 - 1 / S) ** S) <= 0.01


# -- block assignment -------------------------------------------------------------

def test_n_equal_s_gives_a_permutation(rng):
    a = W.assign_blocks(None, 9, rng, n=9)
    assert sorted(a.u.tolist()) == list(range(9))


def test_divisible_stratification(rng):
    labels = np.repeat([0, 1], 50)
    a = W.assign_blocks(labels, 10, rng)
    for block in a.blocks():
        assert np.bincount(labels[block], minlength=2).tolist() == [5, 5]


def test_per_class_balance_over_many_seeds():
    labels = np.array([0, 0, 0, 0, 1, 1, 1])
    for seed in range(300):
        a = W.assign_blocks(labels, 3, W.make_rng(seed))
        counts = np.zeros((2, 3), dtype=int)
        for i, (c, b) in enumerate(zip(labels, a.u)):
            counts[c, b] += 1
        assert np.all(counts.max(axis=1) - counts.min(axis=1) <= 1)
        assert counts.sum() == 7


@given(n=st.integers(1, 200), S=st.integers(1, 50), k=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_assignment_is_a_balanced_partition(n, S, k, seed):
    if S > n:
        with pytest.raises(ValueError):
            W.assign_blocks(None, S, W.make_rng(seed), n=n)
        return
    rng = W.make_rng(seed)
    labels = rng.integers(0, k, n)
    a = W.assign_blocks(labels, S, rng)
    sizes = a.block_sizes
    assert sizes.sum() == n and sizes.min() >= 1
    assert sizes.max() - sizes.min() <= 1
    for c in np.unique(labels):
        per_block = np.bincount(a.u[labels == c], minlength=S)
        assert per_block.max() - per_block.min() <= 1


def test_s_larger_than_n_is_an_error(rng):
    with pytest.raises(ValueError, match="S <= n"):
        W.assign_blocks(np.zeros(3, dtype=int), 4, rng)


# -- expansion --------------------------------------------------------------------

def test_unit_alpha_gives_unit_weights(rng):
    a = W.assign_blocks(None, 4, rng, n=10)
    np.testing.assert_array_equal(W.expand_weights(np.ones(4), a), np.ones(10))


def test_expand_by_definition():
    a = W.BlockAssignment(np.array([0, 1, 0]), 2)
    np.testing.assert_array_equal(W.expand_weights(np.array([0.5, 1.5]), a), [0.5, 1.5, 0.5])


def test_expand_length_mismatch():
    with pytest.raises(ShapeError):
        W.expand_weights(np.ones(3), W.BlockAssignment(np.array([0, 1]), 2))


def test_expanded_weights_have_unit_mean(rng):
    a = W.assign_blocks(None, 20, rng, n=60)
    w = W.expand_weights(W.sample_dirichlet_alpha(20, rng, size=100_000).alpha, a)
    assert np.all(np.abs(w.mean(axis=0) - 1) <= 0.02)


def test_resample_distinct_fraction(rng):
    n = 1000
    idx = W.sample_resample_indices(n, rng, size=400)
    distinct = np.mean([len(np.unique(r)) / n for r in idx])
    assert abs(distinct - (1 - (1 - 1 / n) ** n)) <= 0.01
    assert idx.shape == (400, n)


def test_rwb_weights_positive_and_sum_to_n(rng):
    w = W.sample_rwb_weights(300, rng, size=50)
    assert w.min() > 0
    np.testing.assert_allclose(w.sum(axis=1), 300, atol=1e-6)
