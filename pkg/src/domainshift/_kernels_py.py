"""NumPy implementations of the scoring kernels (fallback for ``_kernels``)."""

from __future__ import annotations

import numpy as np

_ROW_CHUNK = 4096


def score_bits(bits: np.ndarray, table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, kmax = bits.shape
    values = np.zeros(n, dtype=np.float64)
    argmax = np.zeros(n, dtype=np.int32)
    if n == 0 or kmax == 0:
        return values, argmax
    ks = np.arange(1, kmax + 1)[None, :]
    for lo in range(0, n, _ROW_CHUNK):
        cum = np.cumsum(bits[lo : lo + _ROW_CHUNK], axis=1, dtype=np.int32)
        vals = table[ks, cum]
        best = vals.argmax(axis=1)
        values[lo : lo + _ROW_CHUNK] = vals[np.arange(len(vals)), best]
        argmax[lo : lo + _ROW_CHUNK] = best + 1
    return values, argmax


def score_neighbor_rows(
    nbrs: np.ndarray,
    rows: np.ndarray,
    active: np.ndarray,
    is_test: np.ndarray,
    table: np.ndarray,
    k_max: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(rows)
    values = np.zeros(n, dtype=np.float64)
    argmax = np.zeros(n, dtype=np.int32)
    used = np.zeros(n, dtype=np.int32)
    active = active.astype(bool)
    is_test = is_test.astype(np.int32)
    for lo in range(0, n, _ROW_CHUNK):
        sub = nbrs[rows[lo : lo + _ROW_CHUNK]]
        present = sub >= 0
        # a -1 pad ends the row: nothing after it counts
        present &= np.cumprod(present, axis=1, dtype=bool)
        safe = np.where(present, sub, 0)
        act = present & active[safe]
        rank = np.cumsum(act, axis=1, dtype=np.int32)
        valid = act & (rank <= k_max)
        b = np.cumsum(np.where(valid, is_test[safe], 0), axis=1, dtype=np.int32)
        vals = np.where(valid, table[np.minimum(rank, k_max), b], -1.0)
        pos = vals.argmax(axis=1)
        m = len(sub)
        best = vals[np.arange(m), pos]
        ok = best >= 0.0
        values[lo : lo + m] = np.where(ok, best, 0.0)
        argmax[lo : lo + m] = np.where(ok, rank[np.arange(m), pos], 0)
        used[lo : lo + m] = np.minimum(valid.sum(axis=1), k_max)
    return values, argmax, used
