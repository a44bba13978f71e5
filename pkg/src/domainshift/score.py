"""Pointwise nearest-neighbour anomaly score and its Monte-Carlo null.

For a test point with neighbour membership bits ``b_1..b_KM`` (1 = neighbour
from the test cohort) the score is::

    max_{1<=K<=KM}  -log P[Binomial(K, p) >= sum(b_1..b_K)]

with ``p`` the test cohort's share of the active pool. Natural logs throughout.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from . import kernels
from .dataset import X_LABEL, Y_LABEL, NeighborTable, PooledIndex, cohort_code, cohort_name
from .errors import (
    CountOutOfRange,
    EmptyCohort,
    EmptySequence,
    InvalidLevel,
    InvalidProbability,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

_LOG_HALF = math.log(0.5)


def _check_p(p: float) -> None:
    if not (0.0 < p < 1.0) or not math.isfinite(p):
        raise InvalidProbability(f"p must lie in (0, 1), got {p!r}")


def binomial_tail_neglog(K: int, p: float, b_obs: int) -> float:
    """``-log P[Binomial(K, p) >= b_obs]``, accurate deep into both tails.

    Terms are summed in log space. When the upper tail holds more than half
    the mass the complement is used instead (``-log1p(-P[B < b_obs])``) so
    results close to zero keep full relative precision.
    """
    _check_p(p)
    if K < 0 or not 0 <= b_obs <= K:
        raise CountOutOfRange(f"need 0 <= b_obs <= K, got K={K}, b_obs={b_obs}")
    if b_obs == 0:
        return 0.0
    lp, lq = math.log(p), math.log1p(-p)
    logpmf = [math.log(math.comb(K, j)) + j * lp + (K - j) * lq for j in range(K + 1)]
    upper = _logsumexp(logpmf[b_obs:])
    if upper < _LOG_HALF:
        return -upper
    lower = _logsumexp(logpmf[:b_obs])
    return -math.log1p(-math.exp(lower))


def _logsumexp(terms: list[float]) -> float:
    top = max(terms)
    return top + math.log(math.fsum(math.exp(t - top) for t in terms))


@lru_cache(maxsize=32)
def _tail_table_cached(k_max: int, p: float) -> np.ndarray:
    table = np.full((k_max + 1, k_max + 2), np.inf)
    table[:, 0] = 0.0
    lp, lq = math.log(p), math.log1p(-p)
    for K in range(1, k_max + 1):
        j = np.arange(K + 1)
        logpmf = gammaln(K + 1) - gammaln(j + 1) - gammaln(K - j + 1) + j * lp + (K - j) * lq
        upper = np.logaddexp.accumulate(logpmf[::-1])[::-1]  # log P[B >= j]
        lower = np.logaddexp.accumulate(logpmf)  # log P[B <= j]
        row = -upper
        use_lower = upper[1:] >= _LOG_HALF
        with np.errstate(divide="ignore"):
            comp = -np.log1p(-np.exp(np.minimum(lower[:-1], 0.0)))
        row[1:] = np.where(use_lower, comp, row[1:])
        row[0] = 0.0
        table[K, : K + 1] = np.maximum(row, 0.0)
    table.setflags(write=False)
    return table


def tail_table(k_max: int, p: float) -> np.ndarray:
    """Lookup ``T[K, b] = -log P[Binomial(K, p) >= b]`` for ``0 <= b <= K <= k_max``.

    Entries with ``b > K`` are ``inf``. The array is read-only and cached.
    """
    _check_p(p)
    if k_max < 1:
        raise CountOutOfRange("k_max must be >= 1")
    return _tail_table_cached(int(k_max), float(p))


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    argmax_k: int
    direction: str  # "Y-overdensity" or "X-overdensity"


def direction_label(test: str | int) -> str:
    return f"{cohort_name(cohort_code(test))}-overdensity"


def score_sequence(bits, p: float, direction: str = "Y-overdensity") -> AnomalyScore:
    """Score one neighbour sequence; ties in the max go to the smallest ``K``."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size == 0:
        raise EmptySequence("neighbour sequence is empty")
    table = tail_table(bits.size, p)
    values, argmax = kernels.score_bits(bits[None, :], table)
    return AnomalyScore(float(values[0]), int(argmax[0]), direction)


@dataclass
class CohortScores:
    """Scores of the active points of one test cohort (struct of arrays)."""

    ids: np.ndarray  # pooled ids
    values: np.ndarray
    argmax_k: np.ndarray
    n_used: np.ndarray  # neighbours available; < K_M marks a truncated sequence
    p_hat: float
    K_M: int
    direction: str

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> AnomalyScore:
        return AnomalyScore(float(self.values[i]), int(self.argmax_k[i]), self.direction)

    @property
    def truncated(self) -> np.ndarray:
        return self.n_used < self.K_M


def score_rows(
    table_nb: NeighborTable,
    rows: np.ndarray,
    test: int,
    K_M: int,
    p_hat: float,
    lookup: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score pooled rows against the current active mask, repairing short table rows."""
    idx = table_nb.index
    rows = np.asarray(rows, dtype=np.int64)
    if lookup is None:
        lookup = tail_table(K_M, p_hat)
    is_test = idx.origins == test
    values, argmax, used = kernels.score_neighbor_rows(
        table_nb.ids, rows, idx.active, is_test, lookup, K_M
    )
    if not table_nb.complete:
        available = idx.n_active() - 1
        short = np.flatnonzero(used < min(K_M, available))
        if short.size:
            table_nb.refresh_rows(rows[short])
            v, a, u = kernels.score_neighbor_rows(
                table_nb.ids, rows[short], idx.active, is_test, lookup, K_M
            )
            values[short], argmax[short], used[short] = v, a, u
    return values, argmax, used


def score_cohort(
    idx: PooledIndex,
    test: str | int,
    K_M: int,
    table_nb: NeighborTable | None = None,
    margin: int = 64,
) -> CohortScores:
    """Score every active point of ``test`` against the pooled set.

    ``p_hat`` is the test cohort's share of the currently active points.
    """
    test = cohort_code(test)
    if K_M < 1:
        raise CountOutOfRange("K_M must be >= 1")
    n_test = idx.n_active(test)
    n_ref = idx.n_active(1 - test)
    if n_test < 1 or n_ref < 1:
        raise EmptyCohort(f"need >= 1 active point per cohort, have test={n_test}, ref={n_ref}")
    n_act = n_test + n_ref
    if K_M > n_act / 10:
        warnings.warn(
            f"K_M={K_M} exceeds a tenth of the pooled size ({n_act}); "
            "the binomial null is a poor approximation here",
            stacklevel=2,
        )
    p_hat = n_test / n_act
    if table_nb is None:
        table_nb = idx.neighbor_table(K_M + margin)
    ids = idx.active_ids(test)
    values, argmax, used = score_rows(table_nb, ids, test, K_M, p_hat)
    return CohortScores(ids, values, argmax, used, p_hat, K_M, direction_label(test))


# -- Monte-Carlo null ------------------------------------------------------


@dataclass
class NullModel:
    p_hat: float
    K_M: int
    samples: np.ndarray  # sorted ascending
    n_mc: int
    seed: int

    def quantile(self, q: float) -> float:
        """Order statistic ``samples[floor(q * n_mc)]`` (clipped to the last sample)."""
        if not 0.0 <= q <= 1.0:
            raise InvalidLevel(f"quantile level must lie in [0, 1], got {q}")
        k = min(int(math.floor(q * self.n_mc + 1e-9)), self.n_mc - 1)
        return float(self.samples[k])

    def tail(self, threshold: float) -> np.ndarray:
        """Null samples at or above ``threshold`` (sorted)."""
        return self.samples[np.searchsorted(self.samples, threshold, side="left") :]

    def exceedance(self, threshold: float) -> float:
        return len(self.tail(threshold)) / self.n_mc


_MC_CHUNK = 8192


def calibrate_null(K_M: int, p: float, n_mc: int = 100_000, seed: int = 0) -> NullModel:
    """Score ``n_mc`` i.i.d. Bernoulli(p) sequences of length ``K_M``.

    Draws are made in fixed-size chunks, each from its own child of
    ``SeedSequence(seed)``, so the result is a pure function of the arguments.
    """
    _check_p(p)
    if n_mc < 1000:
        raise TooFewSamples(f"n_mc must be >= 1000, got {n_mc}")
    if K_M < 1:
        raise CountOutOfRange("K_M must be >= 1")
    table = tail_table(K_M, p)
    n_chunks = -(-n_mc // _MC_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    samples = np.empty(n_mc)
    for c, child in enumerate(children):
        lo = c * _MC_CHUNK
        m = min(_MC_CHUNK, n_mc - lo)
        bits = np.random.default_rng(child).random((m, K_M)) < p
        samples[lo : lo + m] = kernels.score_bits(bits, table)[0]
    samples.sort()
    return NullModel(p_hat=float(p), K_M=int(K_M), samples=samples, n_mc=int(n_mc), seed=int(seed))


def flag_threshold(null: NullModel, p_ext: float = 1e-5) -> float:
    """Threshold whose null exceedance is ``p_ext``: the ``1 - p_ext`` null quantile."""
    if not 0.0 < p_ext < 1.0:
        raise InvalidLevel(f"p_ext must lie in (0, 1), got {p_ext}")
    if null.n_mc < 10 / p_ext:
        warnings.warn(
            f"n_mc={null.n_mc} gives fewer than 10 expected exceedances at p_ext={p_ext}",
            stacklevel=2,
        )
    return null.quantile(1.0 - p_ext)


def flag(scores: CohortScores, threshold: float) -> np.ndarray:
    """Pooled ids whose score reaches ``threshold``."""
    return scores.ids[scores.values >= threshold]


__all__ = [
    "AnomalyScore",
    "CohortScores",
    "NullModel",
    "X_LABEL",
    "Y_LABEL",
    "binomial_tail_neglog",
    "calibrate_null",
    "flag",
    "flag_threshold",
    "score_cohort",
    "score_rows",
    "score_sequence",
    "tail_table",
]
