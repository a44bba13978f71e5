"""Bidirectional tail-based equalization of two cohorts.

Both cohorts are scored for local over-density. Whenever the upper tail of
either score distribution is significantly heavier than its Monte-Carlo null
tail (one-sided two-sample KS), the most extreme tail points are pruned along
with their run of same-cohort nearest neighbours, up to the first point of
the opposite cohort. Only tail candidates are re-scored between pruning
steps; all points are re-scored (with a refreshed null) once both tails pass,
and the procedure stops when both still pass after that global pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dataset import (
    X_LABEL,
    Y_LABEL,
    FeatureMatrix,
    PooledIndex,
    _exact_topk,
    cohort_code,
    cohort_name,
)
from .errors import (
    EmptyCohort,
    EmptyNullTail,
    EmptyPrunedSet,
    InactiveCandidate,
    InvalidLevel,
    MaxItersExceeded,
)
from .score import NullModel, calibrate_null, score_rows, tail_table

logger = logging.getLogger(__name__)


@dataclass
class EqualizeParams:
    K_M: int = 400
    q_tail: float = 0.97
    alpha: float = 0.05
    prune_batch: int = 10
    max_outer_iters: int = 50
    n_mc: int = 100_000
    min_tail: int = 8
    table_margin: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.q_tail < 1:
            raise InvalidLevel(f"q_tail must lie in (0, 1), got {self.q_tail}")
        if not 0 < self.alpha < 1:
            raise InvalidLevel(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.prune_batch < 1 or self.K_M < 1 or self.max_outer_iters < 1:
            raise ValueError("K_M, prune_batch and max_outer_iters must be >= 1")


@dataclass
class TailTestResult:
    statistic: float
    p_value: float
    reject: bool
    tail_threshold: float
    n_obs_tail: int
    n_null_tail: int

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(self).items()}


def tail_threshold(null: NullModel, q_tail: float = 0.97) -> float:
    if not 0.0 <= q_tail < 1.0:
        raise InvalidLevel(f"q_tail must lie in [0, 1), got {q_tail}")
    return null.quantile(q_tail)


def ks_one_sided(
    obs_tail,
    null_tail,
    alpha: float = 0.05,
    min_tail: int = 8,
    tail_threshold: float = float("nan"),
) -> TailTestResult:
    """One-sided two-sample KS test, H1: observed values stochastically larger.

    ``D+ = sup_x (F_null(x) - F_obs(x))`` over right-continuous ECDFs, p-value
    ``exp(-2 m D+^2)`` with ``m = n_obs n_null / (n_obs + n_null)``. A
    rejection also needs at least ``min_tail`` observed values.
    """
    obs = np.sort(np.asarray(obs_tail, dtype=np.float64))
    null = np.sort(np.asarray(null_tail, dtype=np.float64))
    if null.size == 0:
        raise EmptyNullTail("null tail is empty")
    if obs.size == 0:
        return TailTestResult(0.0, 1.0, False, tail_threshold, 0, int(null.size))
    grid = np.union1d(obs, null)
    f_null = np.searchsorted(null, grid, side="right") / null.size
    f_obs = np.searchsorted(obs, grid, side="right") / obs.size
    stat = max(0.0, float(np.max(f_null - f_obs)))
    m_eff = obs.size * null.size / (obs.size + null.size)
    p_value = min(1.0, math.exp(-2.0 * m_eff * stat * stat))
    reject = p_value < alpha and obs.size >= min_tail
    return TailTestResult(stat, p_value, bool(reject), tail_threshold, int(obs.size), int(null.size))


# -- result types ----------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return {"first": 0, "runs": []}
    change = np.flatnonzero(mask[1:] != mask[:-1]) + 1
    bounds = np.concatenate([[0], change, [mask.size]])
    return {"first": int(mask[0]), "runs": np.diff(bounds).astype(int).tolist()}


def rle_decode(enc: dict) -> np.ndarray:
    out, bit = [], bool(enc["first"])
    for run in enc["runs"]:
        out.append(np.full(run, bit))
        bit = not bit
    return np.concatenate(out) if out else np.zeros(0, dtype=bool)


@dataclass
class EqualizationResult:
    """Pruned representative sets and equalized masks, in cohort-local row ids."""

    pruned_X: list[int]
    pruned_Y: list[int]
    eq_mask_X: np.ndarray
    eq_mask_Y: np.ndarray
    trace: list[dict] = field(default_factory=list)
    outer_iters: int = 0
    converged: bool = False
    max_iters_hit: bool = False
    final_tests: dict = field(default_factory=dict)

    @property
    def n_X(self) -> int:
        return len(self.eq_mask_X)

    @property
    def n_Y(self) -> int:
        return len(self.eq_mask_Y)

    def pruned(self, cohort: str | int) -> list[int]:
        return self.pruned_Y if cohort_code(cohort) == Y_LABEL else self.pruned_X

    def pruned_to_total(self) -> float:
        """``(|pruned X| + |pruned Y|) / (n_X + n_Y)``."""
        return (len(self.pruned_X) + len(self.pruned_Y)) / (self.n_X + self.n_Y)

    def pruned_to_injected(self, injected_ids, cohort: str | int = "Y") -> float:
        injected = set(int(i) for i in injected_ids)
        if not injected:
            raise EmptyPrunedSet("no injected ids given")
        return len(injected.intersection(self.pruned(cohort))) / len(injected)

    def to_json(self, include_trace: bool = True) -> dict:
        out = {
            "n_X": self.n_X,
            "n_Y": self.n_Y,
            "pruned_X": list(map(int, self.pruned_X)),
            "pruned_Y": list(map(int, self.pruned_Y)),
            "eq_mask_X": rle_encode(self.eq_mask_X),
            "eq_mask_Y": rle_encode(self.eq_mask_Y),
            "outer_iters": self.outer_iters,
            "converged": self.converged,
            "max_iters_hit": self.max_iters_hit,
            "pruned_to_total": self.pruned_to_total(),
            "final_tests": self.final_tests,
        }
        if include_trace:
            out["trace"] = self.trace
        return out

    @classmethod
    def from_json(cls, d: dict) -> "EqualizationResult":
        return cls(
            pruned_X=list(d["pruned_X"]),
            pruned_Y=list(d["pruned_Y"]),
            eq_mask_X=rle_decode(d["eq_mask_X"]),
            eq_mask_Y=rle_decode(d["eq_mask_Y"]),
            trace=d.get("trace", []),
            outer_iters=d["outer_iters"],
            converged=d["converged"],
            max_iters_hit=d["max_iters_hit"],
            final_tests=d.get("final_tests", {}),
        )

    def trace_rows(self) -> list[dict]:
        """Flat per-step rows for CSV export (pruned fraction vs step)."""
        rows = []
        total = self.n_X + self.n_Y
        for step, t in enumerate(self.trace):
            rows.append(
                {
                    "step": step,
                    "outer": t["outer"],
                    "phase": t["phase"],
                    "p_hat": t["p_hat"],
                    "ks_Y_stat": t["test_Y"]["statistic"],
                    "ks_Y_p": t["test_Y"]["p_value"],
                    "ks_Y_reject": t["test_Y"]["reject"],
                    "tail_Y": t["test_Y"]["n_obs_tail"],
                    "ks_X_stat": t["test_X"]["statistic"],
                    "ks_X_p": t["test_X"]["p_value"],
                    "ks_X_reject": t["test_X"]["reject"],
                    "tail_X": t["test_X"]["n_obs_tail"],
                    "removed_Y": len(t["removed_Y"]),
                    "removed_X": len(t["removed_X"]),
                    "pruned_fraction": (t["n_pruned_X"] + t["n_pruned_Y"]) / total,
                }
            )
        return rows


# -- the equalizer ---------------------------------------------------------


class Equalizer:
    """Mutable equalization state over one :class:`PooledIndex`.

    Not reentrant: run one equalization per index instance.
    """

    def __init__(self, index: PooledIndex, params: EqualizeParams | None = None, seed: int = 0):
        self.index = index
        self.params = params or EqualizeParams()
        self.seed = int(seed)
        for c in (X_LABEL, Y_LABEL):
            if index.n_active(c) < 1:
                raise EmptyCohort(f"cohort {cohort_name(c)} has no active points")
        self.table = index.neighbor_table(self.params.K_M + self.params.table_margin)
        self.pruned: dict[int, list[int]] = {X_LABEL: [], Y_LABEL: []}
        self.trace: list[dict] = []
        self._nulls: dict[tuple[int, float], NullModel] = {}

    # one walk ------------------------------------------------------------

    def _visible_row(self, i: int, mask: np.ndarray) -> np.ndarray:
        row = self.table.ids[i]
        row = row[row >= 0]
        return row[mask[row]]

    def neighborhood(self, candidate: int, cohort: int, opposite_mask: np.ndarray | None = None) -> list[int]:
        """Candidate plus its same-cohort run of active neighbours before the first opposite point.

        ``opposite_mask`` fixes which opposite-cohort points count as present
        (defaults to the current mask).
        """
        idx = self.index
        mask = idx.active.copy()
        if opposite_mask is not None:
            opp = idx.origins != cohort
            mask[opp] = opposite_mask[opp]
        row = self._visible_row(candidate, mask)
        k = len(row)
        n_visible = int(mask.sum()) - 1
        while True:
            opp_pos = np.flatnonzero(idx.origins[row] != cohort)
            if opp_pos.size:
                return [candidate] + row[: opp_pos[0]].tolist()
            if len(row) >= n_visible:
                return [candidate] + row.tolist()
            k = max(2 * k, self.params.K_M)
            row = idx.knn_ids(candidate, k, mask=mask)[0]

    def prune_step(self, direction: str | int, candidate: int, opposite_mask: np.ndarray | None = None) -> list[int]:
        """Move ``candidate`` and its same-cohort run from the equalized set to the pruned set."""
        cohort = cohort_code(direction)
        idx = self.index
        if not idx.active[candidate]:
            raise InactiveCandidate(f"point {candidate} is not active")
        if idx.origins[candidate] != cohort:
            raise InactiveCandidate(f"point {candidate} does not belong to cohort {cohort_name(cohort)}")
        removed = self.neighborhood(candidate, cohort, opposite_mask)
        idx.deactivate(removed)
        self.pruned[cohort].extend(removed)
        return removed

    # scoring -------------------------------------------------------------

    def _null(self, cohort: int, p: float) -> NullModel:
        key = (cohort, p)
        if key not in self._nulls:
            # same seed in both directions keeps the procedure symmetric under X <-> Y
            self._nulls[key] = calibrate_null(self.params.K_M, p, self.params.n_mc, self.seed)
        return self._nulls[key]

    def _score(self, rows: np.ndarray, cohort: int, p: float) -> np.ndarray:
        if rows.size == 0:
            return np.zeros(0)
        values, _, _ = score_rows(self.table, rows, cohort, self.params.K_M, p, tail_table(self.params.K_M, p))
        return values

    def _test(self, values: np.ndarray, null: NullModel, tau: float) -> TailTestResult:
        obs = values[values >= tau]
        return ks_one_sided(obs, null.tail(tau), self.params.alpha, self.params.min_tail, tau)

    def _record(self, outer, phase, p_y, tests, removed):
        n_x, n_y = self.index.n_X, self.index.n_Y
        self.trace.append(
            {
                "outer": outer,
                "phase": phase,
                "p_hat": p_y,
                "test_Y": tests[Y_LABEL].to_json(),
                "test_X": tests[X_LABEL].to_json(),
                "removed_Y": [int(i) - n_x for i in removed[Y_LABEL]],
                "removed_X": [int(i) for i in removed[X_LABEL]],
                "n_pruned_Y": len(self.pruned[Y_LABEL]),
                "n_pruned_X": len(self.pruned[X_LABEL]),
                "n_active_Y": n_y - len(self.pruned[Y_LABEL]),
                "n_active_X": n_x - len(self.pruned[X_LABEL]),
            }
        )

    # main loop -----------------------------------------------------------

    def run(self) -> EqualizationResult:
        prm = self.params
        idx = self.index
        converged = False
        outer = 0
        tests: dict[int, TailTestResult] = {}
        for outer in range(1, prm.max_outer_iters + 1):
            n_y, n_x = idx.n_active(Y_LABEL), idx.n_active(X_LABEL)
            if n_y == 0 or n_x == 0:
                raise EmptyCohort("equalization emptied a cohort")
            p_y = n_y / (n_x + n_y)
            p_of = {Y_LABEL: p_y, X_LABEL: 1.0 - p_y}
            nulls = {c: self._null(c, p_of[c]) for c in (Y_LABEL, X_LABEL)}
            tau = {c: nulls[c].quantile(prm.q_tail) for c in (Y_LABEL, X_LABEL)}
            cand: dict[int, np.ndarray] = {}
            vals: dict[int, np.ndarray] = {}
            for c in (Y_LABEL, X_LABEL):
                ids = idx.active_ids(c)
                v = self._score(ids, c, p_of[c])
                keep = v >= tau[c]
                cand[c], vals[c] = ids[keep], v[keep]
                tests[c] = self._test(vals[c], nulls[c], tau[c])
            self._record(outer, "global", p_y, tests, {X_LABEL: [], Y_LABEL: []})
            logger.info(
                "outer %d: p=%.4f tailY=%d (p=%.3g) tailX=%d (p=%.3g) pruned=%d/%d",
                outer, p_y, tests[Y_LABEL].n_obs_tail, tests[Y_LABEL].p_value,
                tests[X_LABEL].n_obs_tail, tests[X_LABEL].p_value,
                len(self.pruned[Y_LABEL]), len(self.pruned[X_LABEL]),
            )
            if not (tests[Y_LABEL].reject or tests[X_LABEL].reject):
                converged = True
                break
            while tests[Y_LABEL].reject or tests[X_LABEL].reject:
                snapshot = idx.active.copy()
                removed: dict[int, list[int]] = {X_LABEL: [], Y_LABEL: []}
                for c in (Y_LABEL, X_LABEL):
                    if not tests[c].reject:
                        continue
                    in_tail = vals[c] >= tau[c]
                    ids_t, v_t = cand[c][in_tail], vals[c][in_tail]
                    order = np.lexsort((ids_t, -v_t))[: prm.prune_batch]
                    for i in ids_t[order]:
                        if idx.active[i]:
                            removed[c].extend(self.prune_step(c, int(i), opposite_mask=snapshot))
                for c in (Y_LABEL, X_LABEL):
                    alive = idx.active[cand[c]]
                    cand[c] = cand[c][alive]
                    vals[c] = self._score(cand[c], c, p_of[c])
                    tests[c] = self._test(vals[c], nulls[c], tau[c])
                self._record(outer, "inner", p_y, tests, removed)
        final = {cohort_name(c): t.to_json() for c, t in tests.items()}
        n_x = idx.n_X
        pruned_x = [int(i) for i in self.pruned[X_LABEL]]
        pruned_y = [int(i) - n_x for i in self.pruned[Y_LABEL]]
        result = EqualizationResult(
            pruned_X=pruned_x,
            pruned_Y=pruned_y,
            eq_mask_X=idx.active[:n_x].copy(),
            eq_mask_Y=idx.active[n_x:].copy(),
            trace=self.trace,
            outer_iters=outer,
            converged=converged,
            max_iters_hit=not converged,
            final_tests=final,
        )
        if not converged:
            logger.warning("equalization stopped at max_outer_iters=%d without converging", prm.max_outer_iters)
        return result


def equalize(
    X: FeatureMatrix | np.ndarray,
    Y: FeatureMatrix | np.ndarray,
    params: EqualizeParams | None = None,
    seed: int = 0,
    raise_on_max_iters: bool = False,
) -> EqualizationResult:
    """Run the full equalization on (already standardised) cohorts."""
    index = PooledIndex(X, Y)
    if index.n_X == 0 or index.n_Y == 0:
        raise EmptyCohort("both cohorts must be nonempty")
    result = Equalizer(index, params, seed).run()
    if raise_on_max_iters and result.max_iters_hit:
        raise MaxItersExceeded(f"no convergence after {result.outer_iters} outer iterations")
    return result


def prune_step(eq: Equalizer, direction: str | int, candidate: int) -> list[int]:
    return eq.prune_step(direction, candidate)


# -- modes -----------------------------------------------------------------


@dataclass
class ModePartition:
    modes: list[np.ndarray]
    graph_k: int

    def __len__(self) -> int:
        return len(self.modes)


def partition_modes(pruned, points: np.ndarray | PooledIndex, graph_k: int = 10) -> ModePartition:
    """Connected components of the mutual ``graph_k``-NN graph among the pruned points.

    ``points`` is the coordinate array (or a :class:`PooledIndex`) that the
    ids in ``pruned`` index into. Fragments smaller than ``graph_k`` (boundary
    points with no mutual partner) are merged into the mode holding their
    nearest pruned point outside the fragment. Modes come largest first,
    ties by smallest id.
    """
    if isinstance(points, PooledIndex):
        points = points.points
    pruned = np.unique(np.asarray(pruned, dtype=np.int64))
    if pruned.size == 0:
        raise EmptyPrunedSet("cannot partition an empty pruned set")
    n = pruned.size
    k = min(graph_k, n - 1)
    if k < 1:
        return ModePartition([pruned], graph_k)
    sub = np.ascontiguousarray(points[pruned])
    nb = _exact_topk(sub, np.arange(n), np.arange(n), k, block=512)
    rows = np.repeat(np.arange(n), k)
    cols = nb.ravel().astype(np.int64)
    ok = cols >= 0
    adj = coo_matrix((np.ones(ok.sum()), (rows[ok], cols[ok])), shape=(n, n)).tocsr()
    mutual = adj.multiply(adj.T)
    _, labels = connected_components(mutual, directed=False)
    labels = _absorb_fragments(sub, labels, graph_k)
    groups = [pruned[labels == lab] for lab in np.unique(labels)]
    groups.sort(key=lambda g: (-len(g), int(g[0])))
    return ModePartition(groups, graph_k)


def _absorb_fragments(sub: np.ndarray, labels: np.ndarray, min_size: int) -> np.ndarray:
    labels = labels.copy()
    sq = np.einsum("ij,ij->i", sub, sub)
    while True:
        labs, counts = np.unique(labels, return_counts=True)
        if len(labs) < 2:
            return labels
        small = [(c, int(np.flatnonzero(labels == lab)[0]), lab) for lab, c in zip(labs, counts) if c < min_size]
        if not small:
            return labels
        _, _, lab = min(small)
        members = np.flatnonzero(labels == lab)
        others = np.flatnonzero(labels != lab)
        d2 = sq[members][:, None] + sq[others][None, :] - 2.0 * sub[members] @ sub[others].T
        flat = np.lexsort((others[np.argmin(d2, axis=1)], d2.min(axis=1)))[0]
        target = others[int(np.argmin(d2[flat]))]
        labels[members] = labels[target]
