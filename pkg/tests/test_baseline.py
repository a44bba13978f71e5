import numpy as np
import pytest

from domainshift.baseline import (
    MlpConfig,
    RatioRanking,
    injected_recall_at,
    odds_from_probability,
    rank_by_ratio,
    ranking_from_scores,
    train_mlp,
)
from domainshift.errors import EmptyCohort, EmptyInjectedSet, UntrainedModel
from sklearn.neural_network import MLPClassifier

SMALL = MlpConfig(hidden=(16, 8), max_iters=60, batch_size=64)


def test_separable_toy_ranks_shifted_rows_first(rng):
    X = rng.standard_normal((300, 4))
    Y = rng.standard_normal((300, 4))
    Y[:30, 0] += 6.0
    ranking = rank_by_ratio(train_mlp(X, Y, SMALL), Y)
    assert injected_recall_at(ranking, np.arange(30), k=40) >= 0.9


def test_identical_cohorts_near_half(rng):
    A = rng.standard_normal((400, 3))
    model = train_mlp(A, A.copy(), MlpConfig(hidden=(8,), max_iters=30))
    p = model.predict_proba(A)[:, 1]
    assert abs(p.mean() - 0.5) < 0.05


def test_training_deterministic(rng):
    X, Y = rng.standard_normal((100, 3)), rng.standard_normal((100, 3)) + 0.5
    a = rank_by_ratio(train_mlp(X, Y, SMALL), Y)
    b = rank_by_ratio(train_mlp(X, Y, SMALL), Y)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_loss_decreases_early(rng):
    X, Y = rng.standard_normal((200, 3)), rng.standard_normal((200, 3)) + 2.0
    model = train_mlp(X, Y, MlpConfig(hidden=(8,), max_iters=10))
    assert model.loss_curve_[-1] < model.loss_curve_[0]
    assert len(model.loss_curve_) == 10


def test_errors(rng):
    with pytest.raises(EmptyCohort):
        train_mlp(np.zeros((0, 2)), np.ones((3, 2)))
    with pytest.raises(UntrainedModel):
        rank_by_ratio(MLPClassifier(), np.ones((2, 2)))
    with pytest.raises(EmptyInjectedSet):
        injected_recall_at(ranking_from_scores([1.0, 2.0]), [])


def test_odds_examples():
    assert odds_from_probability(0.9) == pytest.approx(9.0)
    assert odds_from_probability(0.5) == pytest.approx(1.0)
    assert np.isfinite(odds_from_probability(1.0))
    assert odds_from_probability(1.0) == pytest.approx((1 - 1e-7) / 1e-7)


def test_ties_by_ascending_id():
    r = ranking_from_scores(odds_from_probability([0.5, 0.5, 0.5]))
    np.testing.assert_array_equal(r.ids, [0, 1, 2])
    r = ranking_from_scores([0.1, 0.7, 0.7, 0.3])
    np.testing.assert_array_equal(r.ids, [1, 2, 3, 0])
    assert r.rows()[0] == {"id": 1, "score": 0.7, "rank": 1}


def test_ranking_invariant_under_monotone_transform(rng):
    s = rng.random(50)
    np.testing.assert_array_equal(ranking_from_scores(s).ids, ranking_from_scores(np.log(s) * 3 + 1).ids)


def test_recall_examples():
    ranking = RatioRanking(np.arange(1000), np.zeros(1000))
    assert injected_recall_at(ranking, np.arange(200, 400), k=400) == 1.0
    assert injected_recall_at(ranking, np.arange(800, 1000), k=400) == 0.0
    injected = np.r_[np.arange(250, 400), np.arange(600, 650)]
    assert injected_recall_at(ranking, injected, k=400) == pytest.approx(0.75)
    recalls = [injected_recall_at(ranking, injected, k) for k in (10, 100, 300, 400, 700)]
    assert recalls == sorted(recalls)
