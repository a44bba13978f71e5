import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainshift.dataset import PooledIndex
from domainshift.errors import CountOutOfRange, EmptySequence, InvalidProbability, TooFewSamples
from domainshift.score import (
    binomial_tail_neglog,
    calibrate_null,
    flag,
    flag_threshold,
    score_cohort,
    score_sequence,
    tail_table,
)

mpmath.mp.dps = 50


def mp_tail(K, p, b):
    p = mpmath.mpf(p)
    s = mpmath.fsum(mpmath.binomial(K, j) * p**j * (1 - p) ** (K - j) for j in range(b, K + 1))
    return float(-mpmath.log(s))


@pytest.mark.parametrize("p", [0.1, 0.25, 0.5, 0.75])
def test_tail_matches_arbitrary_precision(p):
    for K in range(0, 26):
        for b in range(0, K + 1):
            ref = mp_tail(K, p, b)
            got = binomial_tail_neglog(K, p, b)
            assert got == pytest.approx(ref, rel=1e-10, abs=1e-300)


def test_tail_worked_values():
    assert binomial_tail_neglog(5, 0.5, 5) == pytest.approx(5 * math.log(2), rel=1e-14)
    assert binomial_tail_neglog(4, 0.25, 3) == pytest.approx(-math.log(13 / 256), rel=1e-12)
    assert binomial_tail_neglog(10, 0.3, 0) == 0.0


def test_tail_deep_tails():
    # far upper tail stays finite; near-certain events keep relative precision
    assert binomial_tail_neglog(400, 0.01, 400) == pytest.approx(-400 * math.log(0.01), rel=1e-12)
    ref = mp_tail(400, 0.5, 150)
    assert binomial_tail_neglog(400, 0.5, 150) == pytest.approx(ref, rel=1e-9)


def test_tail_errors():
    with pytest.raises(InvalidProbability):
        binomial_tail_neglog(3, 1.0, 1)
    with pytest.raises(CountOutOfRange):
        binomial_tail_neglog(3, 0.5, 4)


def test_tail_table_agrees_with_scalar():
    T = tail_table(60, 0.37)
    for K in (1, 7, 33, 60):
        for b in range(K + 1):
            assert T[K, b] == pytest.approx(binomial_tail_neglog(K, 0.37, b), rel=1e-9, abs=1e-13)
    assert not T.flags.writeable


@given(st.integers(1, 60), st.floats(0.05, 0.95), st.data())
@settings(max_examples=60, deadline=None)
def test_tail_monotone_in_b(K, p, data):
    b = data.draw(st.integers(0, K - 1))
    assert binomial_tail_neglog(K, p, b + 1) >= binomial_tail_neglog(K, p, b)


def test_score_sequence_examples():
    s = score_sequence([1, 1, 0], 0.5)
    assert s.value == pytest.approx(math.log(4))
    assert s.argmax_k == 2
    assert score_sequence([0, 0, 0], 0.5).value == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(EmptySequence):
        score_sequence([], 0.5)


def test_score_sequence_matches_enumeration(rng):
    for _ in range(1000):
        p = float(rng.uniform(0.1, 0.9))
        bits = (rng.random(50) < rng.uniform(0.05, 0.95)).astype(int)
        b = np.cumsum(bits)
        per_k = [binomial_tail_neglog(k, p, int(b[k - 1])) for k in range(1, 51)]
        best = max(per_k)
        got = score_sequence(bits, p)
        assert got.value == pytest.approx(best, rel=1e-9, abs=1e-12)
        assert got.argmax_k == per_k.index(best) + 1 or per_k[got.argmax_k - 1] == pytest.approx(best, rel=1e-9)


def test_score_cohort_matches_direct(rng):
    X, Y = rng.standard_normal((120, 3)), rng.standard_normal((100, 3)) + 0.3
    idx = PooledIndex(X, Y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sc = score_cohort(idx, "Y", 20)
    assert sc.p_hat == pytest.approx(100 / 220)
    for j in (0, 40, 99):
        pid = sc.ids[j]
        nb = idx.knn_ids(int(pid), 20)[0]
        ref = score_sequence((idx.origins[nb] == 1).astype(int), sc.p_hat)
        assert sc.values[j] == pytest.approx(ref.value, rel=1e-12)


def test_score_cohort_warns_for_large_k(rng):
    idx = PooledIndex(rng.standard_normal((30, 2)), rng.standard_normal((30, 2)))
    with pytest.warns(UserWarning):
        score_cohort(idx, "X", 20)


def test_null_is_deterministic_and_sorted():
    a = calibrate_null(50, 0.4, 5000, seed=3)
    b = calibrate_null(50, 0.4, 5000, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.all(np.diff(a.samples) >= 0)
    assert not np.array_equal(a.samples, calibrate_null(50, 0.4, 5000, seed=4).samples)
    with pytest.raises(TooFewSamples):
        calibrate_null(50, 0.4, 999)


def test_quantile_convention():
    null = calibrate_null(10, 0.5, 1000, seed=0)
    null.samples = np.arange(1000, dtype=float)
    assert null.quantile(0.97) == 970.0
    assert null.quantile(1.0) == 999.0
    assert null.exceedance(970.0) == pytest.approx(0.03)


def test_flag_threshold_and_flag(rng):
    null = calibrate_null(20, 0.5, 2000, seed=1)
    with pytest.warns(UserWarning):
        thr = flag_threshold(null, 1e-3)
    assert thr == null.quantile(1 - 1e-3)
    idx = PooledIndex(rng.standard_normal((200, 2)), rng.standard_normal((200, 2)))
    sc = score_cohort(idx, "Y", 20)
    flagged = flag(sc, thr)
    assert set(flagged) == set(sc.ids[sc.values >= thr])
