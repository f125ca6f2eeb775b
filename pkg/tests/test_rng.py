import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sliceforge.rng import SplitMixStream, mix64


def test_mix64_known_values():
    # mix64(seed + GOLDEN) is the first output of reference SplitMix64;
    # for seed 0 that output is the widely published 0xE220A8397B1DCDAF.
    assert mix64(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF
    assert mix64(0) == 0


def test_streams_reproducible():
    a = SplitMixStream(1, 2, 3).uniform(100)
    b = SplitMixStream(1, 2, 3).uniform(100)
    assert np.array_equal(a, b)


def test_streams_key_sensitive():
    a = SplitMixStream(1, 2, 3).uniform(100)
    b = SplitMixStream(1, 2, 4).uniform(100)
    assert not np.array_equal(a, b)


def test_draws_independent_of_batching():
    s = SplitMixStream(9)
    whole = s.uniform(10)
    s2 = SplitMixStream(9)
    parts = np.concatenate([s2.uniform(3), s2.uniform(7)])
    assert np.array_equal(whole, parts)


def test_uniform_range_and_moments():
    u = SplitMixStream(5).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1 / 12) < 0.002


def test_normal_moments():
    z = SplitMixStream(6).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


@given(st.integers(0, 2 ** 62), st.integers(-5, 5), st.integers(0, 10))
@settings(max_examples=50, deadline=None)
def test_randint_bounds(seed, low, span):
    s = SplitMixStream(seed)
    for _ in range(20):
        v = s.randint(low, low + span)
        assert low <= v <= low + span


def test_permutation_is_permutation():
    p = SplitMixStream(11).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_choice_weighted_distribution():
    s = SplitMixStream(13)
    picks = [s.choice_weighted(("a", "b", "c"), (60, 28, 2)) for _ in range(5000)]
    freq_a = picks.count("a") / 5000
    assert abs(freq_a - 60 / 90) < 0.03
    assert picks.count("c") > 0
