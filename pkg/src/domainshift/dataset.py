"""Cohort loading, pooled standardisation and exact ordered nearest neighbours.

Neighbour order is always by squared Euclidean distance, ties broken by the
ascending pooled index. Bulk queries go through :class:`NeighborTable`, which
is built once over the active points and filtered lazily as points are
deactivated; rows that run short fall back to an exact brute-force query, so
results never depend on the table width.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DimensionMismatch,
    EmptyIndex,
    EmptyInput,
    InactiveQuery,
    MissingFile,
    NonFiniteValue,
    NonNumericCell,
    RaggedRow,
)

logger = logging.getLogger(__name__)

X_LABEL = 0
Y_LABEL = 1
COHORT_LABELS = {"X": X_LABEL, "Y": Y_LABEL}


def cohort_code(cohort: str | int) -> int:
    if isinstance(cohort, str):
        try:
            return COHORT_LABELS[cohort.upper()]
        except KeyError:
            raise ValueError(f"cohort must be 'X' or 'Y', got {cohort!r}") from None
    if cohort not in (X_LABEL, Y_LABEL):
        raise ValueError(f"cohort code must be 0 or 1, got {cohort!r}")
    return int(cohort)


def cohort_name(code: int) -> str:
    return "Y" if code == Y_LABEL else "X"


@dataclass
class FeatureMatrix:
    """An ``n x d`` block of finite reals with unique column names."""

    values: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1) if values.size else values.reshape(0, len(self.feature_names))
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(values.shape[1])]
        if len(self.feature_names) != values.shape[1]:
            raise DimensionMismatch(
                f"{len(self.feature_names)} feature names for {values.shape[1]} columns"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("feature names must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        self.values = values

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def take_columns(self, cols: Sequence[int]) -> "FeatureMatrix":
        cols = list(cols)
        return FeatureMatrix(self.values[:, cols], [self.feature_names[j] for j in cols])


def load_csv(path: str | Path, delimiter: str = ",") -> FeatureMatrix:
    """Read a headed CSV of reals. Line numbers in errors are 1-based file lines."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInput(f"{path}: missing header row") from None
        names = [h.strip() for h in header]
        width = len(names)
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != width:
                raise RaggedRow(
                    f"{path}:{line_no}: expected {width} fields, got {len(record)}", line_no
                )
            row = []
            for col, cell in enumerate(record):
                try:
                    value = float(cell)
                except ValueError:
                    raise NonNumericCell(
                        f"{path}:{line_no}: column {col} ({names[col]!r}) is not numeric: {cell!r}",
                        line_no,
                        col,
                    ) from None
                if not math.isfinite(value):
                    raise NonFiniteValue(
                        f"{path}:{line_no}: column {col} ({names[col]!r}) is not finite", line_no, col
                    )
                row.append(value)
            rows.append(row)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return FeatureMatrix(values, names)


def save_csv(fm: FeatureMatrix, path: str | Path, delimiter: str = ",") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(fm.feature_names)
        for row in fm.values:
            writer.writerow([repr(float(v)) for v in row])


def load_mask(path: str | Path, n: int) -> np.ndarray:
    """Sidecar mask file: one 0/1 per line, exactly ``n`` lines."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    bits = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        token = line.strip()
        if not token:
            continue
        if token not in ("0", "1"):
            raise NonNumericCell(f"{path}:{line_no}: mask entries must be 0 or 1", line_no, 0)
        bits.append(token == "1")
    if len(bits) != n:
        raise DimensionMismatch(f"{path}: mask has {len(bits)} entries, expected {n}")
    return np.array(bits, dtype=bool)


# -- standardisation -------------------------------------------------------


@dataclass
class StandardizationStats:
    means: np.ndarray
    stddevs: np.ndarray
    constant_features: list[int]

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = (np.asarray(values, dtype=np.float64) - self.means) / self.stddevs
        if self.constant_features:
            out[:, self.constant_features] = 0.0
        return out

    def invert(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(values, dtype=np.float64) * self.stddevs + self.means
        return out


def standardize(
    X: FeatureMatrix, Y: FeatureMatrix
) -> tuple[FeatureMatrix, FeatureMatrix, StandardizationStats]:
    """Zero mean / unit population variance on the pooled rows of both cohorts.

    Constant columns are mapped to zeros (not dropped) so feature indices
    stay aligned with the input.
    """
    if X.n_cols != Y.n_cols:
        raise DimensionMismatch(f"X has {X.n_cols} columns, Y has {Y.n_cols}")
    pooled = np.vstack([X.values, Y.values])
    if pooled.shape[0] < 2:
        raise EmptyInput("standardisation needs at least two pooled rows")
    means = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    scale = np.maximum(1.0, np.abs(means))
    constant = np.flatnonzero(std <= 1e-12 * scale)
    std = np.where(std <= 1e-12 * scale, 1.0, std)
    stats = StandardizationStats(means=means, stddevs=std, constant_features=constant.tolist())
    return (
        FeatureMatrix(stats.apply(X.values), list(X.feature_names)),
        FeatureMatrix(stats.apply(Y.values), list(Y.feature_names)),
        stats,
    )


# -- pooled index ----------------------------------------------------------


def _sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return (diff * diff).sum(axis=-1)


class PooledIndex:
    """Pooled ``X`` then ``Y`` rows with origin labels and an active mask.

    Mutating the mask (:meth:`deactivate`, :meth:`activate`) must not overlap
    with queries; queries themselves are read-only.
    """

    def __init__(self, X: FeatureMatrix | np.ndarray, Y: FeatureMatrix | np.ndarray):
        xv = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
        yv = Y.values if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=np.float64)
        if xv.ndim != 2 or yv.ndim != 2 or xv.shape[1] != yv.shape[1]:
            raise DimensionMismatch(f"cannot pool shapes {xv.shape} and {yv.shape}")
        self.points = np.ascontiguousarray(np.vstack([xv, yv]), dtype=np.float64)
        self.n_X = xv.shape[0]
        self.n_Y = yv.shape[0]
        self.origins = np.concatenate(
            [np.full(self.n_X, X_LABEL, dtype=np.int8), np.full(self.n_Y, Y_LABEL, dtype=np.int8)]
        )
        self.active = np.ones(self.n_X + self.n_Y, dtype=bool)
        self._reactivations = 0

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def n_active(self, cohort: str | int | None = None) -> int:
        if cohort is None:
            return int(self.active.sum())
        return int(self.active[self.origins == cohort_code(cohort)].sum())

    def active_ids(self, cohort: str | int | None = None) -> np.ndarray:
        mask = self.active
        if cohort is not None:
            mask = mask & (self.origins == cohort_code(cohort))
        return np.flatnonzero(mask)

    def local_id(self, pooled_id: int) -> int:
        return pooled_id if pooled_id < self.n_X else pooled_id - self.n_X

    def pooled_id(self, cohort: str | int, local: int | np.ndarray):
        return local if cohort_code(cohort) == X_LABEL else np.asarray(local) + self.n_X

    def deactivate(self, ids) -> None:
        self.active[np.asarray(ids, dtype=np.int64)] = False

    def activate(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and not self.active[ids].all():
            self._reactivations += 1
        self.active[ids] = True

    def knn_query(self, q: int, k: int) -> list[tuple[int, str, float]]:
        ids, d2 = self.knn_ids(q, k)
        return [(int(i), cohort_name(self.origins[i]), math.sqrt(v)) for i, v in zip(ids, d2)]

    def knn_ids(
        self, q: int, k: int, mask: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Exact brute-force query: ``(ids, squared distances)``.

        Candidates are the current actives, or the points selected by ``mask``.
        """
        if self.n_active() == 0:
            raise EmptyIndex("index has no active points")
        if not 0 <= q < self.n_points or not self.active[q]:
            raise InactiveQuery(f"query point {q} is not active")
        if k < 1:
            raise ValueError("k must be >= 1")
        cand = np.flatnonzero(self.active if mask is None else mask)
        cand = cand[cand != q]
        d2 = _sq_dists(self.points[cand], self.points[q])
        order = np.lexsort((cand, d2))[:k]
        return cand[order], d2[order]

    def neighbor_table(self, width: int, block: int = 256) -> "NeighborTable":
        return NeighborTable(self, width, block=block)


def pool(X: FeatureMatrix, Y: FeatureMatrix) -> PooledIndex:
    if X.n_cols != Y.n_cols:
        raise DimensionMismatch(f"X has {X.n_cols} columns, Y has {Y.n_cols}")
    return PooledIndex(X, Y)


def knn_query(idx: PooledIndex, q: int, k: int) -> list[tuple[int, str, float]]:
    return idx.knn_query(q, k)


KD_TREE_MAX_DIM = 8


def _exact_topk(
    points: np.ndarray, qids: np.ndarray, cand_pool: np.ndarray, width: int, block: int
) -> np.ndarray:
    """Exact ``width`` nearest of each query among ``cand_pool`` (self excluded).

    Candidates are screened with a kd-tree in low dimension and with the BLAS
    distance expansion otherwise; the final order always uses exact
    difference distances with ties broken by pooled id.
    """
    n_q = len(qids)
    out = np.full((n_q, width), -1, dtype=np.int32)
    if n_q == 0 or width == 0:
        return out
    P = points[cand_pool]
    avail = len(cand_pool)
    n_sel = min(width + 9, avail)
    use_tree = points.shape[1] <= KD_TREE_MAX_DIM and n_sel < avail
    if use_tree:
        tree = cKDTree(P)
    else:
        sq_p = np.einsum("ij,ij->i", P, P)
    pos_in_pool = np.full(points.shape[0], -1, dtype=np.int64)
    pos_in_pool[cand_pool] = np.arange(avail)
    for lo in range(0, n_q, block):
        q = qids[lo : lo + block]
        Q = points[q]
        has_self = pos_in_pool[q] >= 0
        n_other = avail - has_self.astype(np.int64)
        if n_sel == avail:
            sel = np.broadcast_to(np.arange(avail), (len(q), avail)).copy()
        elif use_tree:
            sel = tree.query(Q, k=n_sel)[1]
        else:
            D = Q @ P.T
            D *= -2.0
            D += sq_p[None, :]
            D += np.einsum("ij,ij->i", Q, Q)[:, None]
            self_pos = pos_in_pool[q]
            D[np.flatnonzero(has_self), self_pos[has_self]] = np.inf
            sel = np.argpartition(D, n_sel - 1, axis=1)[:, :n_sel]
        cand = cand_pool[sel]
        diff = points[cand] - Q[:, None, :]
        d2 = (diff * diff).sum(axis=-1)
        d2[cand == q[:, None]] = np.inf
        order = np.lexsort((cand, d2), axis=1)
        ranked = np.take_along_axis(cand, order, axis=1)
        take = min(width, ranked.shape[1])
        chunk = ranked[:, :take].astype(np.int32)
        for r in range(len(q)):
            m = min(take, int(n_other[r]))
            out[lo + r, :m] = chunk[r, :m]
    return out


class NeighborTable:
    """Exact ordered neighbour lists of width ``width`` over the points active at build time.

    Because pruning only ever removes points, filtering a row by the current
    mask keeps it an exact prefix of the current neighbour order. A row that
    filters down below what a caller needs is recomputed exactly.
    """

    def __init__(self, index: PooledIndex, width: int, block: int = 256):
        self.index = index
        self.build_active = index.active.copy()
        self._reactivations = index._reactivations
        build_ids = np.flatnonzero(self.build_active)
        self.n_build_active = len(build_ids)
        self.width = int(max(0, min(width, self.n_build_active - 1)))
        self.ids = np.full((index.n_points, max(self.width, 1)), -1, dtype=np.int32)
        if self.width > 0:
            self.ids[build_ids] = _exact_topk(index.points, build_ids, build_ids, self.width, block)
        # a row is complete when it lists every other build-time active point
        self.complete = self.width >= self.n_build_active - 1

    def _check_fresh(self) -> None:
        if self.index._reactivations != self._reactivations:
            raise RuntimeError("points were reactivated after the table was built; rebuild it")

    def active_neighbors(self, i: int, k: int) -> np.ndarray:
        """First ``k`` currently active neighbours of ``i`` in exact order."""
        self._check_fresh()
        row = self.ids[i]
        row = row[row >= 0]
        row = row[self.index.active[row]]
        if len(row) >= k or self.complete:
            return row[:k].astype(np.int64)
        ids, _ = self.index.knn_ids(i, k)
        return ids

    def refresh_rows(self, rows: np.ndarray, block: int = 256) -> None:
        """Recompute ``rows`` over the current actives.

        Valid because later masks are subsets of the current one, so the new
        rows stay exact prefixes under further filtering.
        """
        self._check_fresh()
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0 or self.width == 0:
            return
        current = np.flatnonzero(self.index.active)
        self.ids[rows] = -1
        self.ids[rows] = _exact_topk(self.index.points, rows, current, self.width, block)
