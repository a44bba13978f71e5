"""Classifier two-sample baseline: rank Y rows by the posterior odds of a cohort discriminator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier

from .dataset import FeatureMatrix
from .errors import EmptyCohort, EmptyInjectedSet, UntrainedModel

PROB_CLIP = 1e-7


@dataclass
class MlpConfig:
    hidden: tuple[int, ...] = (128, 64, 32)
    lr: float = 1e-3
    l2: float = 1e-4
    batch_size: int = 256
    max_iters: int = 300
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.hidden) < 1 or self.lr <= 0 or self.l2 < 0 or self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("MLP sizes, lr, batch_size and max_iters must be positive")


def _values(M) -> np.ndarray:
    return M.values if isinstance(M, FeatureMatrix) else np.asarray(M, dtype=np.float64)


def train_mlp(X, Y, cfg: MlpConfig | None = None) -> MLPClassifier:
    """Fit a ReLU network separating ``X`` (label 0) from ``Y`` (label 1).

    Adam on log-loss with an L2 penalty, for exactly ``cfg.max_iters`` epochs
    (early stopping is disabled). Deterministic given ``cfg.seed``.
    """
    cfg = cfg or MlpConfig()
    xv, yv = _values(X), _values(Y)
    if len(xv) == 0 or len(yv) == 0:
        raise EmptyCohort("both cohorts need at least one row")
    data = np.vstack([xv, yv])
    labels = np.r_[np.zeros(len(xv), dtype=int), np.ones(len(yv), dtype=int)]
    model = MLPClassifier(
        hidden_layer_sizes=cfg.hidden,
        activation="relu",
        solver="adam",
        alpha=cfg.l2,
        batch_size=cfg.batch_size,
        learning_rate_init=cfg.lr,
        max_iter=cfg.max_iters,
        shuffle=True,
        random_state=cfg.seed,
        early_stopping=False,
        n_iter_no_change=cfg.max_iters + 1,
        tol=0.0,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(data, labels)
    return model


@dataclass
class RatioRanking:
    ids: np.ndarray  # Y row ids, best first
    scores: np.ndarray

    def top(self, k: int) -> np.ndarray:
        return self.ids[:k]

    def rows(self) -> list[dict]:
        return [
            {"id": int(i), "score": float(s), "rank": r + 1}
            for r, (i, s) in enumerate(zip(self.ids, self.scores))
        ]


def odds_from_probability(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return p / (1.0 - p)


def ranking_from_scores(scores) -> RatioRanking:
    """Descending by score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return RatioRanking(order, scores[order])


def rank_by_ratio(model, Y) -> RatioRanking:
    if not hasattr(model, "coefs_"):
        raise UntrainedModel("model has not been fitted")
    p_y = model.predict_proba(_values(Y))[:, 1]
    return ranking_from_scores(odds_from_probability(p_y))


def injected_recall_at(ranking: RatioRanking, injected, k: int = 400) -> float:
    """Fraction of ``injected`` ids found among the top ``k`` of ``ranking``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    injected = np.unique(np.asarray(injected, dtype=np.int64))
    if injected.size == 0:
        raise EmptyInjectedSet("no injected ids given")
    return float(np.isin(injected, ranking.top(k)).sum() / injected.size)
