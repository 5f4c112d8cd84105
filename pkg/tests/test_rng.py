"""Deterministic stream semantics: addressability, derivation, sampling."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cduq.kernels import u64_at, unit_at
from cduq.mathcore import RngStream


def test_stream_is_pure_function_of_state():
    a = RngStream(99)
    b = RngStream(99)
    assert list(a.uniforms(10)) == list(b.uniforms(10))
    assert a.counter == b.counter == 10
    # restoring (seed, counter) replays the remainder of the stream
    c = RngStream(99, 10)
    assert list(a.uniforms(5)) == list(c.uniforms(5))


def test_draws_are_addressable():
    s = RngStream(7)
    xs = list(s.uniforms(8))
    assert xs == [unit_at(7, i) for i in range(8)]


def test_gaussians_consume_even_counters():
    s = RngStream(5)
    s.gaussians(3)
    assert s.counter == 4
    # the next draw continues at the aligned position
    assert s.uniform() == unit_at(5, 4)


def test_derive_independent_of_parent_counter():
    a = RngStream(11)
    a.uniforms(100)
    b = RngStream(11)
    assert a.derive("x").seed == b.derive("x").seed


def test_derive_tag_types_and_order():
    s = RngStream(3)
    assert s.derive("a", 1).seed != s.derive("a", 2).seed
    assert s.derive("a", 1).seed != s.derive(1, "a").seed
    assert s.derive("ab").seed != s.derive("a", "b").seed
    with pytest.raises(ValueError):
        s.derive()
    with pytest.raises(TypeError):
        s.derive(1.5)


def test_derive_nested_matches_chained():
    s = RngStream(17)
    assert s.derive("a", "b").seed == s.derive("a").derive("b").seed


def test_randint_bounds_and_determinism():
    s = RngStream(23)
    vals = [s.randint(10) for _ in range(1000)]
    assert all(0 <= v < 10 for v in vals)
    assert set(vals) == set(range(10))
    with pytest.raises(ValueError):
        s.randint(0)


def test_shuffle_is_permutation():
    s = RngStream(31)
    items = list(range(50))
    s.shuffle(items)
    assert sorted(items) == list(range(50))
    assert items != list(range(50))


def test_sample_indices_sorted_distinct():
    s = RngStream(37)
    for _ in range(20):
        idx = s.sample_indices(30, 7)
        assert idx == sorted(idx)
        assert len(set(idx)) == 7
        assert all(0 <= i < 30 for i in idx)
    assert s.sample_indices(5, 0) == []
    assert s.sample_indices(5, 5) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        s.sample_indices(3, 4)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32))
@settings(max_examples=50, deadline=None)
def test_uniform_range_property(seed, counter):
    v = unit_at(seed, counter)
    assert 0.0 <= v < 1.0
    assert v == (u64_at(seed, counter) >> 11) / 2.0**53


@given(st.integers(0, 2**64 - 1))
@settings(max_examples=30, deadline=None)
def test_gaussian_finite_property(seed):
    s = RngStream(seed)
    assert all(math.isfinite(g) for g in s.gaussians(16))


def test_sample_indices_unbiased_enough():
    # each index of range(6) should appear in a 3-sample about half the time
    counts = [0] * 6
    s = RngStream(101)
    trials = 3000
    for _ in range(trials):
        for i in s.sample_indices(6, 3):
            counts[i] += 1
    for c in counts:
        assert abs(c / trials - 0.5) < 0.05
