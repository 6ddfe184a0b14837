import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wimamba.errors import DimensionError
from wimamba.tokenizer import (
    POLICY_GAUSSIAN,
    POLICY_KEEP,
    POLICY_ONES,
    MaskSet,
    apply_masking,
    build_mask_set,
    detokenize,
    n_tokens,
    normalize_channel,
    tokenize,
)


def complex_channel(rng, N, M):
    return rng.standard_normal((N, M)) + 1j * rng.standard_normal((N, M))


def test_exact_division(rng):
    ts = tokenize(complex_channel(rng, 4, 4), 16)
    assert ts.n_tokens == 2 and ts.pad == 0


def test_32x32_gives_128_tokens(rng):
    assert tokenize(complex_channel(rng, 32, 32), 16).n_tokens == 128
    assert n_tokens(32, 32, 16) == 128


def test_padding_5x5(rng):
    H = complex_channel(rng, 5, 5)
    ts = tokenize(H, 16)
    assert ts.n_tokens == 4 and ts.pad == 7
    assert np.all(ts.tokens[1, -7:] == 0) and np.all(ts.tokens[3, -7:] == 0)
    assert np.all(ts.tokens[1, :-7] != 0)


def test_column_major_real_then_imag():
    H = np.arange(6).reshape(2, 3) + 1j * (10 + np.arange(6).reshape(2, 3))
    ts = tokenize(H, 3)
    assert ts.tokens[:2].ravel().tolist() == [0, 3, 1, 4, 2, 5]
    assert ts.tokens[2:].ravel().tolist() == [10, 13, 11, 14, 12, 15]


@settings(max_examples=50, deadline=None)
@given(N=st.integers(1, 40), M=st.integers(1, 40), L=st.sampled_from([1, 4, 16, 36, 64]))
def test_token_count_formula(N, M, L):
    T = n_tokens(N, M, L)
    assert T >= math.ceil(2 * N * M / L)
    if (N * M) % L == 0:
        assert T == 2 * N * M // L


def test_round_trip_100_channels():
    rng = np.random.default_rng(5)
    for _ in range(100):
        N, M = rng.integers(1, 20, size=2)
        L = int(rng.choice([4, 16, 64]))
        H = complex_channel(rng, N, M)
        assert np.array_equal(detokenize(tokenize(H, L)), H)


def test_round_trip_tokens_side(rng):
    ts = tokenize(complex_channel(rng, 5, 5), 16)
    again = tokenize(detokenize(ts), 16)
    assert np.array_equal(again.tokens, ts.tokens)


def test_zero_matrix():
    ts = tokenize(np.zeros((3, 3), dtype=complex), 4)
    assert not ts.tokens.any()
    assert not detokenize(ts).any()


def test_detokenize_dimension_mismatch(rng):
    ts = tokenize(complex_channel(rng, 4, 4), 16)
    with pytest.raises(DimensionError):
        detokenize(ts, 5, 5)


def test_tokenize_rejects_bad_input():
    with pytest.raises(DimensionError):
        tokenize(np.zeros(4), 2)
    with pytest.raises(ValueError):
        tokenize(np.array([[np.nan]]), 1)


# ---------------------------------------------------------------- masking

def test_mask_size_from_ratio(rng):
    assert len(build_mask_set(128, 0.15, rng)) == 20


def test_mask_pairing_closure():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        half = int(rng.integers(1, 40))
        T = 2 * half
        m = build_mask_set(T, float(rng.uniform(0.01, 0.99)), rng)
        idx = set(m.indices.tolist())
        assert {(i + half) % T for i in idx} == idx
        assert len(idx) % 2 == 0 and len(idx) == len(m.indices)
        assert list(m.indices) == sorted(idx)


def test_policy_frequencies():
    rng = np.random.default_rng(11)
    draws = np.concatenate([build_mask_set(8, 0.2, rng).policies for _ in range(10_000)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.all(np.abs(freq - [0.8, 0.1, 0.1]) <= 0.02)


def test_mask_errors(rng):
    with pytest.raises(ValueError):
        build_mask_set(7, 0.5, rng)
    with pytest.raises(ValueError):
        build_mask_set(8, 0.0, rng)
    with pytest.raises(ValueError):
        build_mask_set(8, 1.0, rng)


def test_apply_masking_policies(rng):
    ts = tokenize(complex_channel(rng, 4, 8), 4)
    before = ts.tokens.copy()
    m = MaskSet(np.array([0, 1, 2, 8, 9, 10]),
                np.array([POLICY_ONES, POLICY_GAUSSIAN, POLICY_KEEP] * 2), ts.n_tokens)
    out = apply_masking(ts, m, rng)
    assert np.array_equal(out.tokens[0], np.ones(4))
    assert not np.allclose(out.tokens[1], ts.tokens[1])
    assert np.array_equal(out.tokens[2], ts.tokens[2])
    untouched = [i for i in range(ts.n_tokens) if i not in m.indices]
    assert np.array_equal(out.tokens[untouched], ts.tokens[untouched])
    assert np.array_equal(ts.tokens, before)


def test_keep_only_mask_is_noop(rng):
    ts = tokenize(complex_channel(rng, 4, 4), 4)
    m = MaskSet(np.array([1, 5]), np.array([POLICY_KEEP, POLICY_KEEP]), ts.n_tokens)
    assert np.array_equal(apply_masking(ts, m, rng).tokens, ts.tokens)


# ---------------------------------------------------------------- normalization

def test_normalize_unit_channel():
    H = np.ones((3, 3), dtype=complex)
    out, scale = normalize_channel(H)
    assert scale == 1.0 and np.array_equal(out, H)


def test_normalize_homogeneity(rng):
    H = complex_channel(rng, 4, 6)
    a, s1 = normalize_channel(H)
    b, s2 = normalize_channel(2 * H)
    assert np.allclose(a, b) and s2 == pytest.approx(2 * s1)


def test_normalize_unit_power(rng):
    out, _ = normalize_channel(complex_channel(rng, 8, 8) * 37)
    assert abs(np.mean(np.abs(out) ** 2) - 1) < 1e-6


def test_normalize_zero_raises():
    with pytest.raises(ValueError):
        normalize_channel(np.zeros((2, 2)))
