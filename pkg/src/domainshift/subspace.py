"""Neighbour-enriched subspace localisation.

Learns one nonnegative weight per feature so that the soft ``K``-NN
neighbourhoods of query rows hold as much target-cohort mass as possible,
then picks a discrete feature subset by hard-KNN cross-validation.

Parameterisation: ``w_raw = softplus(theta)``,
``w_eff = w_raw * d / (stopgrad(sum(w_raw)) + 1e-8)``. Distances use
``w_eff``; the l1 penalty acts on ``w_raw``. Gradients are analytic and treat
the normalising sum and the top-K selection as constants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .errors import (
    DegenerateBatch,
    InsufficientQueries,
    NoQueriesInBatch,
    NonFiniteParameter,
    SubsetOutOfRange,
    TooFewSamplesPerFold,
)

logger = logging.getLogger(__name__)

STABILIZER = 1e-8
DIAG_PENALTY = 1e9
TAU_FLOOR = 1e-6


@dataclass
class TrainConfig:
    K: int = 100
    beta: float = 0.2
    epochs: int = 3000
    batch_size: int = 200
    pos_frac: float = 0.5
    tau_start: float = 1.0
    tau_end: float = 0.1
    lr: float = 1e-2
    l1: float = 1e-2
    n_splits: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.K, self.epochs, self.batch_size, self.n_splits) < 1:
            raise ValueError("K, epochs, batch_size and n_splits must be positive")
        if not 0 < self.pos_frac < 1:
            raise ValueError(f"pos_frac must lie in (0, 1), got {self.pos_frac}")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("need 0 < tau_end <= tau_start")
        if self.lr <= 0 or self.l1 < 0 or self.beta < 0:
            raise ValueError("lr must be positive; l1 and beta nonnegative")


@dataclass
class SubspaceMasks:
    target_mask: np.ndarray
    query_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.target_mask = np.asarray(self.target_mask, dtype=bool)
        if self.query_mask is None:
            self.query_mask = self.target_mask.copy()
        self.query_mask = np.asarray(self.query_mask, dtype=bool)
        if self.query_mask.shape != self.target_mask.shape:
            raise ValueError("target_mask and query_mask must have the same length")
        if not self.query_mask.any():
            raise InsufficientQueries("at least one query row is required")


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def effective_weights(theta) -> tuple[np.ndarray, np.ndarray]:
    """``(w_raw, w_eff)`` for unconstrained parameters ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteParameter("theta contains non-finite entries")
    w_raw = softplus(theta)
    w_eff = w_raw * (theta.size / (w_raw.sum() + STABILIZER))
    return w_raw, w_eff


def effective_weights_jacobian(theta) -> np.ndarray:
    """Diagonal of ``d w_eff / d theta`` with the normalising sum held fixed."""
    theta = np.asarray(theta, dtype=np.float64)
    w_raw = softplus(theta)
    return sigmoid(theta) * (theta.size / (w_raw.sum() + STABILIZER))


@dataclass
class WeightVector:
    theta: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    obj_history: list[float] = field(default_factory=list)
    raw_sum_history: list[float] = field(default_factory=list)
    sampled_with_replacement: bool = False
    skipped_steps: int = 0

    @property
    def w_raw(self) -> np.ndarray:
        return effective_weights(self.theta)[0]

    @property
    def w_eff(self) -> np.ndarray:
        return effective_weights(self.theta)[1]

    def ranking(self) -> np.ndarray:
        """Feature indices by decreasing ``w_eff``, ties by ascending index."""
        w = self.w_eff
        return np.lexsort((np.arange(w.size), -w))


# -- soft KNN --------------------------------------------------------------


def _weighted_sq_dists(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    Zw = Z * w
    sq = np.einsum("ij,ij->i", Zw, Zw)
    D = sq[:, None] + sq[None, :] - 2.0 * (Zw @ Zw.T)
    np.maximum(D, 0.0, out=D)
    return D


def _topk_softmax(logits: np.ndarray, K: int) -> np.ndarray:
    B = logits.shape[0]
    k_eff = min(K, B - 1)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k_eff]
    top = np.take_along_axis(logits, order, axis=1)
    top = top - top.max(axis=1, keepdims=True)
    e = np.exp(top)
    e /= e.sum(axis=1, keepdims=True)
    P = np.zeros_like(logits)
    np.put_along_axis(P, order, e, axis=1)
    return P


def soft_knn_probs(batch: np.ndarray, w_eff: np.ndarray, tau: float, K: int) -> np.ndarray:
    """Row-wise softmax of ``-d^2 / max(1e-6, tau)`` restricted to each row's top ``K`` logits.

    Self matches are pushed out with a ``-1e9`` diagonal shift, so ``P_ii = 0``.
    For ``K >= B`` this is the full softmax over the off-diagonal entries.
    """
    Z = np.asarray(batch, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DegenerateBatch("soft KNN needs a batch of at least two rows")
    logits = -_weighted_sq_dists(Z, np.asarray(w_eff, dtype=np.float64)) / max(TAU_FLOOR, tau)
    logits[np.diag_indices_from(logits)] -= DIAG_PENALTY
    return _topk_softmax(logits, K)


def batch_objective(
    P: np.ndarray, query_b: np.ndarray, target_b: np.ndarray, w_raw: np.ndarray, lam: float
) -> tuple[float, float]:
    """Mean soft target mass over batch queries, and the penalised loss ``-obj + lam * sum(w_raw)``."""
    query_b = np.asarray(query_b, dtype=bool)
    if not query_b.any():
        raise NoQueriesInBatch("batch has no queries; skip this step")
    mass = P @ np.asarray(target_b, dtype=np.float64)
    obj = float(mass[query_b].mean())
    return obj, -obj + lam * float(np.sum(w_raw))


def loss_and_grad(
    theta: np.ndarray,
    Z: np.ndarray,
    query_b: np.ndarray,
    target_b: np.ndarray,
    tau: float,
    K: int,
    lam: float,
) -> tuple[float, float, np.ndarray]:
    """Loss, objective and the analytic gradient with respect to ``theta``."""
    w_raw, w_eff = effective_weights(theta)
    P = soft_knn_probs(Z, w_eff, tau, K)
    obj, loss = batch_objective(P, query_b, target_b, w_raw, lam)
    t = np.asarray(target_b, dtype=np.float64)
    q = np.asarray(query_b, dtype=np.float64)
    mass = P @ t
    # d obj / d logit_ij, zero outside the retained top-K entries
    G = (q / q.sum())[:, None] * P * (t[None, :] - mass[:, None])
    Z2 = Z * Z
    # sum_ij G_ij (z_if - z_jf)^2 for every feature f
    A = G.sum(axis=1) @ Z2 + G.sum(axis=0) @ Z2 - 2.0 * np.einsum("if,if->f", Z, G @ Z)
    tau_eff = max(TAU_FLOOR, tau)
    d_obj_d_w = -(2.0 / tau_eff) * w_eff * A
    grad = -d_obj_d_w * effective_weights_jacobian(theta) + lam * sigmoid(theta)
    return loss, obj, grad


class Adam:
    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def temperature(epoch: int, cfg: TrainConfig) -> float:
    if cfg.epochs == 1:
        return cfg.tau_start
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** (epoch / (cfg.epochs - 1))


def train_weights(U: np.ndarray, masks: SubspaceMasks, cfg: TrainConfig | None = None) -> WeightVector:
    """Adam on ``theta`` (initialised to zeros), one stratified batch per epoch."""
    cfg = cfg or TrainConfig()
    U = np.asarray(U, dtype=np.float64)
    n, d = U.shape
    if len(masks.target_mask) != n:
        raise ValueError("mask length must equal the number of rows")
    rng = np.random.default_rng(cfg.seed)
    q_ids = np.flatnonzero(masks.query_mask)
    nq_ids = np.flatnonzero(~masks.query_mask)
    n_q = int(round(cfg.batch_size * cfg.pos_frac))
    n_nq = cfg.batch_size - n_q
    if nq_ids.size == 0:
        n_q, n_nq = cfg.batch_size, 0
    replace_q = q_ids.size < n_q
    replace_nq = nq_ids.size < n_nq
    if replace_q:
        logger.warning("only %d queries for %d batch slots; sampling with replacement", q_ids.size, n_q)
    theta = np.zeros(d)
    opt = Adam(cfg.lr)
    wv = WeightVector(theta, sampled_with_replacement=bool(replace_q))
    for epoch in range(cfg.epochs):
        tau = temperature(epoch, cfg)
        parts = [rng.choice(q_ids, n_q, replace=replace_q)]
        if n_nq:
            parts.append(rng.choice(nq_ids, n_nq, replace=replace_nq))
        batch = rng.permutation(np.concatenate(parts))
        qb = masks.query_mask[batch]
        if not qb.any():
            wv.skipped_steps += 1
            continue
        loss, obj, grad = loss_and_grad(
            theta, U[batch], qb, masks.target_mask[batch], tau, cfg.K, cfg.l1
        )
        opt.step(theta, grad)
        wv.loss_history.append(loss)
        wv.obj_history.append(obj)
        wv.raw_sum_history.append(float(softplus(theta).sum()))
    wv.theta = theta
    return wv


# -- discrete subset selection ---------------------------------------------


def subset_grid(d: int) -> list[int]:
    """Candidate subset sizes, largest first.

    ``d``, then multiples of 50 down to 150, multiples of 5 down to 50,
    even numbers down to 16, then every integer from 15 to 1 (each segment
    clipped to values below ``d``).
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    grid = [d]
    segments = [
        range((d - 1) // 50 * 50, 149, -50),
        range(145, 49, -5),
        range(48, 15, -2),
        range(15, 0, -1),
    ]
    for seg in segments:
        grid.extend(m for m in seg if m < d)
    return grid


def top_m(w_eff: np.ndarray, m: int) -> np.ndarray:
    w_eff = np.asarray(w_eff)
    order = np.lexsort((np.arange(w_eff.size), -w_eff))
    return np.sort(order[:m])


@dataclass
class SubsetScore:
    m: int
    mean_score: float
    purity_only: float
    per_fold: list[float]
    per_fold_purity: list[float]

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "mean_score": self.mean_score,
            "purity_only": self.purity_only,
            "per_fold": self.per_fold,
            "per_fold_purity": self.per_fold_purity,
        }


def make_folds(query_mask: np.ndarray, n_splits: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled folds stratified by the query flag."""
    query_mask = np.asarray(query_mask, dtype=bool)
    n_q = int(query_mask.sum())
    if n_splits < 2:
        raise ValueError("n_splits must be >= 2")
    if n_q < n_splits or (~query_mask).sum() < n_splits and (~query_mask).any():
        raise TooFewSamplesPerFold(
            f"{n_q} queries / {(~query_mask).sum()} non-queries cannot fill {n_splits} folds"
        )
    if not (~query_mask).any():
        rng = np.random.default_rng(seed)
        perm = rng.permutation(query_mask.size)
        chunks = np.array_split(perm, n_splits)
        return [(np.sort(np.concatenate(chunks[:i] + chunks[i + 1 :])), np.sort(c)) for i, c in enumerate(chunks)]
    skf = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    return list(skf.split(np.zeros(query_mask.size), query_mask.astype(int)))


def _ranked_hits(train_pts: np.ndarray, train_ids: np.ndarray, val_pts: np.ndarray, target: np.ndarray, K: int):
    """Target flags of each validation row's ``K`` nearest training rows, nearest first."""
    k = min(K, train_pts.shape[0])
    sq_t = np.einsum("ij,ij->i", train_pts, train_pts)
    out = np.zeros((val_pts.shape[0], k), dtype=bool)
    neighbors = np.zeros((val_pts.shape[0], k), dtype=np.int64)
    for lo in range(0, val_pts.shape[0], 128):
        V = val_pts[lo : lo + 128]
        D = sq_t[None, :] - 2.0 * (V @ train_pts.T)  # + |v|^2, constant per row
        sel = np.argpartition(D, k - 1, axis=1)[:, :k] if k < D.shape[1] else np.tile(np.arange(D.shape[1]), (len(V), 1))
        diff = train_pts[sel] - V[:, None, :]
        d2 = (diff * diff).sum(axis=-1)
        order = np.lexsort((train_ids[sel], d2), axis=1)
        nb = np.take_along_axis(sel, order, axis=1)
        neighbors[lo : lo + len(V)] = train_ids[nb]
        out[lo : lo + len(V)] = target[train_ids[nb]]
    return out, neighbors


def enrichment_scores(hits: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-query ``s_i = phi_i + beta (1 - phi_i) q_i`` and purity ``phi_i``.

    ``q_i`` is DCG (gain 1 per hit, discount ``1/log2(rank + 1)``) over its
    ideal value for the same hit count; zero when there are no hits.
    """
    hits = np.asarray(hits, dtype=bool)
    k = hits.shape[1]
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    c = hits.sum(axis=1)
    phi = c / k
    dcg = hits @ disc
    ideal = np.concatenate([[0.0], np.cumsum(disc)])[c]
    q = np.divide(dcg, ideal, out=np.zeros_like(dcg), where=c > 0)
    return phi + beta * (1.0 - phi) * q, phi


def cv_subset_score(
    U: np.ndarray,
    masks: SubspaceMasks,
    subset,
    K: int = 100,
    beta: float = 0.2,
    n_splits: int = 5,
    seed: int = 0,
    folds: list[tuple[np.ndarray, np.ndarray]] | None = None,
    _audit: list | None = None,
) -> SubsetScore:
    """Leakage-safe hard-KNN enrichment of held-out queries in the ``subset`` coordinates.

    Neighbours of a validation query are searched among that fold's training
    rows only. ``_audit``, if given, collects ``(validation ids, neighbour ids)``
    per fold for leakage checks.
    """
    U = np.asarray(U, dtype=np.float64)
    subset = np.asarray(sorted(set(int(j) for j in subset)), dtype=np.int64)
    if subset.size == 0 or subset.min() < 0 or subset.max() >= U.shape[1]:
        raise SubsetOutOfRange(f"subset must be nonempty indices in [0, {U.shape[1]})")
    if folds is None:
        folds = make_folds(masks.query_mask, n_splits, seed)
    Us = np.ascontiguousarray(U[:, subset])
    per_fold, per_fold_purity = [], []
    for train_idx, val_idx in folds:
        val_q = val_idx[masks.query_mask[val_idx]]
        if val_q.size == 0:
            continue
        hits, nbrs = _ranked_hits(Us[train_idx], train_idx, Us[val_q], masks.target_mask, K)
        if _audit is not None:
            _audit.append((val_idx, nbrs))
        s, phi = enrichment_scores(hits, beta)
        per_fold.append(float(s.mean()))
        per_fold_purity.append(float(phi.mean()))
    if not per_fold:
        raise TooFewSamplesPerFold("no fold contains a validation query")
    return SubsetScore(
        m=int(subset.size),
        mean_score=float(np.mean(per_fold)),
        purity_only=float(np.mean(per_fold_purity)),
        per_fold=per_fold,
        per_fold_purity=per_fold_purity,
    )


def select_subset(
    U: np.ndarray, masks: SubspaceMasks, w: WeightVector | np.ndarray, cfg: TrainConfig | None = None
) -> tuple[int, np.ndarray, list[SubsetScore]]:
    """Best grid size ``m*`` (ties to the smallest) and ``TopM(w_eff, m*)``."""
    cfg = cfg or TrainConfig()
    w_eff = w.w_eff if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    d = w_eff.size
    folds = make_folds(masks.query_mask, cfg.n_splits, cfg.seed)
    curve = []
    for m in subset_grid(d):
        curve.append(cv_subset_score(U, masks, top_m(w_eff, m), cfg.K, cfg.beta, folds=folds))
    best = min(curve, key=lambda s: (-s.mean_score, s.m))
    return best.m, top_m(w_eff, best.m), curve


def jaccard(a, b) -> float:
    a, b = set(int(i) for i in a), set(int(i) for i in b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
