import numpy as np
import pytest
from scipy.spatial.distance import cdist

from domainshift import dataset as ds
from domainshift.dataset import FeatureMatrix, PooledIndex, load_csv, save_csv, standardize
from domainshift.errors import (
    DimensionMismatch,
    EmptyInput,
    InactiveQuery,
    MissingFile,
    NonFiniteValue,
    NonNumericCell,
    RaggedRow,
)


def test_load_csv_roundtrip(tmp_path, rng):
    fm = FeatureMatrix(rng.standard_normal((7, 3)), ["a", "b", "c"])
    save_csv(fm, tmp_path / "m.csv")
    back = load_csv(tmp_path / "m.csv")
    assert back.feature_names == ["a", "b", "c"]
    np.testing.assert_array_equal(back.values, fm.values)


@pytest.mark.parametrize(
    "body,err,line",
    [
        ("a,b\n1,2\n3\n", RaggedRow, 3),
        ("a,b\n1,x\n", NonNumericCell, 2),
        ("a,b\n1,nan\n", NonFiniteValue, 2),
    ],
)
def test_load_csv_errors_carry_location(tmp_path, body, err, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(err) as info:
        load_csv(p)
    assert info.value.line == line


def test_load_csv_missing_and_empty(tmp_path):
    with pytest.raises(MissingFile):
        load_csv(tmp_path / "nope.csv")
    (tmp_path / "h.csv").write_text("a,b\n")
    assert load_csv(tmp_path / "h.csv").values.shape == (0, 2)
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(EmptyInput):
        load_csv(tmp_path / "e.csv")


def test_standardize_pooled_moments_and_constants(rng):
    X = FeatureMatrix(np.c_[rng.normal(3, 2, 500), np.full(500, 4.0)], ["u", "k"])
    Y = FeatureMatrix(np.c_[rng.normal(-1, 1, 300), np.full(300, 4.0)], ["u", "k"])
    Xs, Ys, stats = standardize(X, Y)
    pooled = np.vstack([Xs.values, Ys.values])
    np.testing.assert_allclose(pooled[:, 0].mean(), 0, atol=1e-12)
    np.testing.assert_allclose(pooled[:, 0].std(), 1, atol=1e-12)
    assert list(stats.constant_features) == [1]
    assert np.all(pooled[:, 1] == 0)
    np.testing.assert_allclose(stats.invert(Xs.values)[:, 0], X.values[:, 0], rtol=1e-12)


def test_standardize_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        standardize(FeatureMatrix(rng.random((3, 2))), FeatureMatrix(rng.random((3, 3))))


def test_knn_matches_cdist_oracle(rng):
    X, Y = rng.standard_normal((60, 4)), rng.standard_normal((50, 4))
    idx = PooledIndex(X, Y)
    D = cdist(idx.points, idx.points, "sqeuclidean")
    for q in (0, 17, 80, 109):
        ids, d2 = idx.knn_ids(q, 15)
        cand = np.delete(np.arange(110), q)
        ref = cand[np.lexsort((cand, D[q, cand]))][:15]
        np.testing.assert_array_equal(ids, ref)
        np.testing.assert_allclose(d2, D[q, ref], rtol=1e-12, atol=1e-12)


def test_knn_ties_resolved_by_id():
    pts = np.array([[0.0], [1.0], [-1.0], [2.0]])
    idx = PooledIndex(pts[:2], pts[2:])
    assert [i for i, _, _ in idx.knn_query(0, 2)] == [1, 2]


def test_knn_respects_active_mask(rng):
    idx = PooledIndex(rng.standard_normal((30, 2)), rng.standard_normal((30, 2)))
    first = idx.knn_ids(0, 3)[0]
    idx.deactivate(first[:1])
    assert first[0] not in idx.knn_ids(0, 3)[0]
    with pytest.raises(InactiveQuery):
        idx.knn_ids(int(first[0]), 3)


@pytest.mark.parametrize("dim", [3, 12])
def test_neighbor_table_exact_in_both_screening_paths(rng, dim):
    pts = rng.standard_normal((400, dim))
    pts[5] = pts[9]  # exact duplicate: tie must resolve by id
    idx = PooledIndex(pts[:200], pts[200:])
    table = idx.neighbor_table(30)
    D = cdist(pts, pts, "sqeuclidean")
    for q in range(0, 400, 37):
        cand = np.delete(np.arange(400), q)
        ref = cand[np.lexsort((cand, D[q, cand]))][:30]
        np.testing.assert_array_equal(table.ids[q], ref)


def test_neighbor_table_filtering_is_exact_after_pruning(rng):
    idx = PooledIndex(rng.standard_normal((150, 3)), rng.standard_normal((150, 3)))
    table = idx.neighbor_table(20)
    idx.deactivate(rng.choice(300, 120, replace=False))
    for q in idx.active_ids()[:25]:
        np.testing.assert_array_equal(table.active_neighbors(int(q), 15), idx.knn_ids(int(q), 15)[0])


def test_refresh_rows_recomputes_over_current_actives(rng):
    idx = PooledIndex(rng.standard_normal((100, 2)), rng.standard_normal((100, 2)))
    table = idx.neighbor_table(10)
    idx.deactivate(table.ids[0][:8])
    table.refresh_rows(np.array([0]))
    np.testing.assert_array_equal(table.ids[0], idx.knn_ids(0, 10)[0])


def test_reactivation_invalidates_table(rng):
    idx = PooledIndex(rng.standard_normal((20, 2)), rng.standard_normal((20, 2)))
    table = idx.neighbor_table(5)
    idx.deactivate([3])
    idx.activate([3])
    with pytest.raises(RuntimeError):
        table.active_neighbors(0, 3)


def test_kd_screening_matches_blas(monkeypatch, rng):
    pts = rng.standard_normal((700, 4))
    ids = np.arange(700)
    a = ds._exact_topk(pts, ids, ids, 40, 128)
    monkeypatch.setattr(ds, "KD_TREE_MAX_DIM", 0)
    b = ds._exact_topk(pts, ids, ids, 40, 128)
    np.testing.assert_array_equal(a, b)
