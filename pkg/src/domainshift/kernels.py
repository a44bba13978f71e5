"""Kernel dispatch: compiled extension when built, NumPy otherwise.

Set ``DOMAINSHIFT_PURE_PYTHON=1`` before import to force the fallback. Both
back ends return identical arrays; ``tests/test_kernels.py`` checks this.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DOMAINSHIFT_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def score_bits(bits: np.ndarray, table: np.ndarray, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """Score each 0/1 row: ``max_K table[K, sum(bits[:K])]`` and the smallest maximising ``K``."""
    impl = impl or _impl
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    table = np.ascontiguousarray(table, dtype=np.float64)
    return impl.score_bits(bits, table)


def score_neighbor_rows(
    nbrs: np.ndarray,
    rows: np.ndarray,
    active: np.ndarray,
    is_test: np.ndarray,
    table: np.ndarray,
    k_max: int,
    impl=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score neighbour-table rows, skipping inactive neighbours.

    Returns ``(values, argmax_k, used)`` where ``used`` is how many active
    neighbours the row supplied (``< k_max`` means the row ran short).
    """
    impl = impl or _impl
    return impl.score_neighbor_rows(
        np.ascontiguousarray(nbrs, dtype=np.int32),
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(active, dtype=np.uint8),
        np.ascontiguousarray(is_test, dtype=np.uint8),
        np.ascontiguousarray(table, dtype=np.float64),
        int(k_max),
    )


def python_impl():
    return _kernels_py


def compiled_impl():
    """The compiled module, or ``None`` if it was not built."""
    try:
        from . import _kernels as mod  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover
        return None
    return mod
