"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Fast criteria (6-11) run in seconds to a minute. The benchmark criteria are
marked ``slow``: 1-3 use the scaled n=10,000 benchmark (several minutes
each) and 4-5 share one full-size n=50,000 localized run. The full-size
11-seed global run is marked ``longrun`` and only runs with
``DOMAINSHIFT_LONGRUN=1``.

    pytest tests/test_acceptance.py -v            # everything but longrun
    pytest tests/test_acceptance.py -v -m "not slow"

The verdict lines are repeated in an "acceptance criteria" section at the
end of the pytest output.
"""

import itertools
import json
import warnings

import mpmath
import numpy as np
import pytest

from domainshift.benchgen import make_global_pair
from domainshift.cli import dump_json
from domainshift.dataset import PooledIndex, standardize
from domainshift.equalize import EqualizeParams, equalize, ks_one_sided
from domainshift.pipeline import RunConfig, inclusion_frequency, run_pipeline
from domainshift.score import binomial_tail_neglog, calibrate_null, score_cohort, score_sequence
from domainshift.subspace import (
    batch_objective,
    effective_weights,
    enrichment_scores,
    loss_and_grad,
    soft_knn_probs,
    softplus,
)

SIGMAS = (0.1, 0.2, 0.3, 0.4, 0.5)
SCALED_N = 10_000
GLOBAL_TRUTH = {0, 1, 3}
LOCAL_TRUTH = {2, 4, 6, 8, 9}


def _fmt(values):
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# -- benchmark criteria -----------------------------------------------------


@pytest.mark.slow
def test_c01_null_behavior(verdict):
    report = run_pipeline(RunConfig(source="global", sigma=0.0, n=SCALED_N, seeds=list(range(5))))
    empty = sum(not s["shift_set"] for s in report["seeds"])
    ratios = [s["metrics"]["pruned_to_total"] for s in report["seeds"]]
    ok = empty >= 4 and max(ratios) < 0.02
    assert verdict(1, ok, f"empty shift sets {empty}/5 (need >= 4), pruned-to-total {_fmt(ratios)} (need < 0.02)")


@pytest.mark.slow
def test_c02_global_recovery(verdict):
    report = run_pipeline(RunConfig(source="global", sigma=0.3, n=SCALED_N, seeds=list(range(5))))
    freq = inclusion_frequency([s["shift_set"] for s in report["seeds"]], 20)
    dominant = inclusion_frequency([s["metrics"]["dominant_support"] for s in report["seeds"]], 20)
    true_f = [freq[j] for j in sorted(GLOBAL_TRUTH)]
    other_max = max(f for j, f in enumerate(freq) if j not in GLOBAL_TRUTH)
    ok = min(true_f) >= 0.8 and other_max <= 0.4
    detail = (
        f"freq of x0,x1,x3 = {true_f} (need >= 0.8), max other = {other_max} (need <= 0.4); "
        f"dominant-mode only: x0,x1,x3 = {[dominant[j] for j in sorted(GLOBAL_TRUTH)]}, "
        f"max other = {max(f for j, f in enumerate(dominant) if j not in GLOBAL_TRUTH)}"
    )
    assert verdict(2, ok, detail)


@pytest.mark.slow
def test_c03_monotone_pruned_ratio(verdict):
    params = EqualizeParams()
    means = []
    for sigma in SIGMAS:
        ratios = []
        for seed in range(5):
            X, Y, _ = make_global_pair(sigma, SCALED_N, seed)
            Xs, Ys, _ = standardize(X, Y)
            ratios.append(equalize(Xs, Ys, params, seed).pruned_to_total())
        means.append(float(np.mean(ratios)))
    ok = all(b > a for a, b in zip(means, means[1:]))
    assert verdict(3, ok, f"seed-mean pruned-to-total over sigma {list(SIGMAS)}: {_fmt(means)}")


@pytest.fixture(scope="module")
def local_report():
    cfg = RunConfig(source="local", n_inject=300, n=50_000, seeds=[0, 1, 2], run_baseline=True)
    return run_pipeline(cfg)


@pytest.mark.slow
def test_c04_localized_recovery(verdict, local_report):
    ratios = [s["metrics"]["pruned_to_injected"] for s in local_report["seeds"]]
    supports = [set(s["metrics"]["dominant_support"]) for s in local_report["seeds"]]
    support_ok = all(LOCAL_TRUTH <= s and len(s - LOCAL_TRUTH) <= 2 for s in supports)
    ok = np.mean(ratios) >= 0.85 and support_ok
    detail = (
        f"mean pruned-to-injected {np.mean(ratios):.4f} {_fmt(ratios)} (need >= 0.85); "
        f"dominant supports {[sorted(s) for s in supports]} (need superset of 2,4,6,8,9 with <= 2 extra)"
    )
    assert verdict(4, ok, detail)


@pytest.mark.slow
def test_c05_baseline_contrast(verdict, local_report):
    ratios = [s["metrics"]["pruned_to_injected"] for s in local_report["seeds"]]
    recalls = [s["metrics"]["injected_recall_at_400"] for s in local_report["seeds"]]
    gap = float(np.mean(ratios) - np.mean(recalls))
    detail = f"pipeline {np.mean(ratios):.4f} vs MLP recall@400 {np.mean(recalls):.4f} {_fmt(recalls)}, gap {gap:.4f} (need >= 0.3)"
    assert verdict(5, gap >= 0.3, detail)


@pytest.mark.longrun
def test_c02_full_scale_global_recovery(verdict):
    report = run_pipeline(RunConfig(source="global", sigma=0.3, n=50_000, seeds=list(range(11))))
    freq = inclusion_frequency([s["shift_set"] for s in report["seeds"]], 20)
    true_f = [freq[j] for j in sorted(GLOBAL_TRUTH)]
    other_max = max(f for j, f in enumerate(freq) if j not in GLOBAL_TRUTH)
    ok = min(true_f) >= 0.8 and other_max <= 0.4
    detail = f"n=50000, 11 seeds: freq of x0,x1,x3 = {_fmt(true_f)}, max other = {other_max:.4f}"
    assert verdict(2, ok, detail, label="2L")


# -- oracle criteria --------------------------------------------------------


def _mp_tail(K, p, b):
    p = mpmath.mpf(p)
    s = mpmath.fsum(mpmath.binomial(K, j) * p**j * (1 - p) ** (K - j) for j in range(b, K + 1))
    return float(-mpmath.log(s))


def test_c06_score_oracle(verdict):
    mpmath.mp.dps = 50
    worst = 0.0
    for p in (0.1, 0.25, 0.5, 0.75):
        for K in range(26):
            for b in range(K + 1):
                ref, got = _mp_tail(K, p, b), binomial_tail_neglog(K, p, b)
                if ref == 0.0:
                    err = abs(got)
                else:
                    err = abs(got - ref) / abs(ref)
                worst = max(worst, err)
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        p = float(rng.uniform(0.05, 0.95))
        bits = (rng.random(50) < rng.uniform(0.05, 0.95)).astype(int)
        b = np.cumsum(bits)
        best = max(binomial_tail_neglog(k, p, int(b[k - 1])) for k in range(1, 51))
        mismatches += not np.isclose(score_sequence(bits, p).value, best, rtol=1e-12, atol=0)
    ok = worst < 1e-10 and mismatches == 0
    assert verdict(6, ok, f"max rel err vs 50-digit sums {worst:.2e} (need < 1e-10); enumeration mismatches {mismatches}/1000")


def test_c07_null_calibration(verdict):
    # K_M = 100 keeps K_M at 1/40 of the pooled size. At K_M = 400 (a tenth) the
    # overlapping neighbourhoods correlate the scores enough that the spread of
    # the exceedance fraction is visibly wider than the binomial SD used here.
    K_M, n = 100, 2000
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        idx = PooledIndex(rng.standard_normal((n, 5)), rng.standard_normal((n, 5)))
        for test in ("X", "Y"):
            sc = score_cohort(idx, test, K_M)
            null = calibrate_null(K_M, sc.p_hat, 100_000, seed)
            for q in (0.9, 0.97, 0.99):
                frac = float(np.mean(sc.values > null.quantile(q)))
                z = abs(frac - (1 - q)) / np.sqrt(q * (1 - q) / n)
                worst = max(worst, z)
    assert verdict(7, worst <= 4.0, f"worst |z| {worst:.2f} over 3 seeds x 2 cohorts x q in (0.9, 0.97, 0.99) (need <= 4)")


def _permutation_p(obs, null):
    """Exact one-sided permutation p-value of D+ over all label assignments."""
    pool = np.r_[obs, null]
    n, N = len(obs), len(pool)
    order = np.argsort(pool, kind="stable")
    srt = pool[order]
    last_of_tie = np.r_[srt[1:] != srt[:-1], True]
    combos = np.array(list(itertools.combinations(range(N), n)))
    masks = np.zeros((len(combos), N), dtype=bool)
    masks[np.arange(len(combos))[:, None], combos] = True
    sorted_masks = masks[:, order]
    f_obs = np.cumsum(sorted_masks, axis=1) / n
    f_null = np.cumsum(~sorted_masks, axis=1) / (N - n)
    d = np.maximum(0.0, (f_null - f_obs)[:, last_of_tie].max(axis=1))
    observed = np.zeros(N, dtype=bool)
    observed[:n] = True
    d0 = d[np.flatnonzero((masks == observed).all(axis=1))[0]]
    return float(np.mean(d >= d0 - 1e-12))


def test_c08_ks_permutation_oracle(verdict):
    # 10 blocks of 200 instances: a single block of 200 has a standard error of
    # about 1.4 points around the ~4% disagreement rate, so it is reported per
    # block and judged on the pooled rate.
    rng = np.random.default_rng(8)
    per_block = []
    for _ in range(10):
        disagree = 0
        for _ in range(200):
            N = int(rng.integers(2, 13))
            n = int(rng.integers(1, N))
            obs = rng.normal(rng.uniform(0, 3), 1, n)
            null = rng.normal(0, 1, N - n)
            # min_tail=1: compare the p-value decision itself, not the size guard
            res = ks_one_sided(obs, null, alpha=0.05, min_tail=1)
            disagree += res.reject != (_permutation_p(obs, null) < 0.05)
        per_block.append(disagree)
    rate = sum(per_block) / 2000
    detail = f"decision disagreement {sum(per_block)}/2000 = {rate:.4f} (need <= 0.05); per block of 200: {per_block}"
    assert verdict(8, rate <= 0.05, detail)


def _stopgrad_loss(theta, theta0, Z, q, t, tau, K, lam):
    w_raw = softplus(theta)
    w_eff = w_raw * theta.size / (softplus(theta0).sum() + 1e-8)
    return batch_objective(soft_knn_probs(Z, w_eff, tau, K), q, t, w_raw, lam)[1]


def test_c09_gradient(verdict):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        n, d, K = 40, 6, 5
        Z = rng.standard_normal((n, d))
        theta = rng.normal(0, 1, d)
        q = rng.random(n) < 0.5
        q[0] = True
        t = q | (rng.random(n) < 0.3)
        tau = float(rng.uniform(0.2, 1.5))
        _, _, g = loss_and_grad(theta, Z, q, t, tau, K, 0.01)
        h = 1e-5
        fd = np.array([
            (_stopgrad_loss(theta + h * e, theta, Z, q, t, tau, K, 0.01)
             - _stopgrad_loss(theta - h * e, theta, Z, q, t, tau, K, 0.01)) / (2 * h)
            for e in np.eye(d)
        ])
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    assert verdict(9, worst < 1e-4, f"max relative error vs central differences {worst:.2e} (need < 1e-4)")


def test_c10_soft_knn_and_selection(verdict):
    rng = np.random.default_rng(10)
    failures = []
    for _ in range(100):
        B, K = int(rng.integers(2, 30)), int(rng.integers(1, 40))
        P = soft_knn_probs(rng.standard_normal((B, 5)), rng.uniform(0.1, 2, 5), float(rng.uniform(0.01, 2)), K)
        if not np.allclose(P.sum(1), 1.0, atol=1e-12):
            failures.append("row sums")
        if np.any((P > 0).sum(1) > min(K, B - 1)) or np.any(np.diag(P) != 0):
            failures.append("support")
        theta = rng.normal(0, 3, 5)
        w_raw, w_eff = effective_weights(theta)
        if not np.isclose(w_eff.sum(), 5 * w_raw.sum() / (w_raw.sum() + 1e-8), rtol=1e-12):
            failures.append("weight sum")
    s, phi = enrichment_scores(np.array([[False, False, True]]), beta=1.0)
    q = (s[0] - phi[0]) / (1.0 - phi[0])
    if not np.isclose(q, 0.5, rtol=1e-12):
        failures.append(f"dcg q={q}")
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    P = soft_knn_probs(tri, np.ones(2), 1.0, 2)
    off = P[~np.eye(3, dtype=bool)]
    if not np.allclose(off, 0.5, atol=1e-12):
        failures.append("triangle")
    detail = "row-stochastic, top-K support, sum w_eff = d, DCG q = 0.5, triangle 0.5/0.5"
    assert verdict(10, not failures, detail + (f"; failed: {sorted(set(failures))}" if failures else ""))


def test_c11_determinism(verdict, tmp_path):
    cfg = RunConfig(source="global", sigma=0.6, n=1500, seeds=[0, 1])
    paths = []
    for k in range(2):
        report = run_pipeline(cfg)
        report.pop("timing")
        paths.append(tmp_path / f"report{k}.json")
        dump_json(report, paths[-1])
    a, b = (p.read_bytes() for p in paths)
    n_modes = sum(s["metrics"]["n_modes_attributed"] for s in json.loads(a)["seeds"])
    assert verdict(11, a == b, f"two runs, {len(a)} bytes each, {n_modes} attributed modes: {'identical' if a == b else 'differ'}")
