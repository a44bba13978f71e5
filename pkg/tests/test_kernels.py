import numpy as np
import pytest

from domainshift import kernels
from domainshift.score import tail_table

compiled = kernels.compiled_impl()
python = kernels.python_impl()
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _naive_scores(bits, table):
    vals, arg = [], []
    for row in bits:
        best, best_k, b = 0.0, 0, 0
        for k, bit in enumerate(row, start=1):
            b += int(bit)
            if table[k, b] > best:
                best, best_k = table[k, b], k
        vals.append(best)
        arg.append(best_k)
    return np.array(vals), np.array(arg)


def test_python_score_bits_matches_naive(rng):
    table = tail_table(40, 0.3)
    bits = (rng.random((200, 40)) < 0.35).astype(np.uint8)
    v, a = kernels.score_bits(bits, table, impl=python)
    nv, na = _naive_scores(bits, table)
    np.testing.assert_array_equal(v, nv)
    np.testing.assert_array_equal(a, na)


@needs_ext
def test_backends_bit_identical_score_bits(rng):
    table = tail_table(60, 0.5)
    bits = (rng.random((500, 60)) < 0.55).astype(np.uint8)
    v1, a1 = kernels.score_bits(bits, table, impl=compiled)
    v2, a2 = kernels.score_bits(bits, table, impl=python)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(a1, a2)


@needs_ext
def test_backends_bit_identical_neighbor_rows(rng):
    n, w, k_max = 300, 50, 30
    nbrs = rng.integers(0, n, (n, w)).astype(np.int32)
    nbrs[::7, 20:] = -1
    active = (rng.random(n) < 0.7).astype(np.uint8)
    is_test = (rng.random(n) < 0.5).astype(np.uint8)
    rows = np.arange(0, n, 3)
    table = tail_table(k_max, 0.5)
    r1 = kernels.score_neighbor_rows(nbrs, rows, active, is_test, table, k_max, impl=compiled)
    r2 = kernels.score_neighbor_rows(nbrs, rows, active, is_test, table, k_max, impl=python)
    for x, y in zip(r1, r2):
        np.testing.assert_array_equal(x, y)


def test_neighbor_rows_skip_inactive_and_stop_at_padding():
    table = tail_table(3, 0.5)
    nbrs = np.array([[1, 2, 3, -1, 4]], dtype=np.int32)
    active = np.array([1, 1, 0, 1, 1], dtype=np.uint8)
    is_test = np.array([0, 1, 1, 1, 1], dtype=np.uint8)
    v, a, used = kernels.score_neighbor_rows(nbrs, np.array([0]), active, is_test, table, 3, impl=python)
    assert used[0] == 2  # neighbour 2 inactive, -1 ends the row before 4
    assert v[0] == pytest.approx(table[2, 2])


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
