import numpy as np
from hypothesis import given, strategies as st

from gnnuq.rng import MASK64, SplitMix64, derive_seed


def reference_next(state):
    # textbook splitmix64, written out independently
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def test_known_vector():
    assert SplitMix64(1234567).next_u64() == 0x599ED017FB08FC85


@given(st.integers(0, MASK64), st.integers(1, 50))
def test_vectorized_matches_sequential(seed, n):
    a, b = SplitMix64(seed), SplitMix64(seed)
    seq = [a.next_u64() for _ in range(n)]
    assert b.u64_array(n).tolist() == seq
    assert a.state == b.state


@given(st.integers(0, MASK64))
def test_matches_reference(seed):
    g, state = SplitMix64(seed), seed
    for _ in range(5):
        state, z = reference_next(state)
        assert g.next_u64() == z


def test_uniform_range_and_mean():
    u = SplitMix64(9).uniform_array(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


@given(st.integers(0, 2**32), st.integers(0, 40))
def test_shuffle_is_permutation(seed, n):
    assert sorted(SplitMix64(seed).shuffle(list(range(n)))) == list(range(n))


@given(st.integers(0, 2**32), st.integers(1, 30), st.data())
def test_sample_without_replacement_distinct(seed, n, data):
    k = data.draw(st.integers(0, n))
    picks = SplitMix64(seed).sample_without_replacement(n, k)
    assert len(set(picks)) == k and all(0 <= p < n for p in picks)


def test_derived_streams_differ():
    seeds = {derive_seed(7, k) for k in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)
    assert derive_seed(7, 3) == derive_seed(7, 3)


def test_below_bounds():
    g = SplitMix64(3)
    draws = np.array([g.below(7) for _ in range(7000)])
    assert draws.min() == 0 and draws.max() == 6
    assert np.all(np.abs(np.bincount(draws) / 7000 - 1 / 7) < 0.02)
