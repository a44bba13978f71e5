"""End-to-end runs: standardise, equalize, split pruned sets into modes, attribute each mode.

Attribution alternates subspace selection with localisation: after a subspace
is chosen for a mode, equalization is re-run on the selected columns and the
mode is re-identified there, until the selected support stops changing.
"""

from __future__ import annotations

import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__, kernels
from .baseline import MlpConfig, injected_recall_at, rank_by_ratio, train_mlp
from .benchgen import make_global_pair, make_local_pair
from .dataset import X_LABEL, Y_LABEL, FeatureMatrix, cohort_code, cohort_name, load_csv, standardize
from .equalize import EqualizationResult, EqualizeParams, equalize, partition_modes
from .errors import EmptyPrunedSet, InvalidSpec, MaxItersExceeded, StageError
from .subspace import SubspaceMasks, TrainConfig, jaccard, select_subset, train_weights

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


@dataclass
class RefineConfig:
    max_refine_iters: int = 5
    jaccard_stop: float = 0.95
    relocalize: bool = True
    min_mode_size: int = 20
    graph_k: int = 10

    def __post_init__(self) -> None:
        if self.max_refine_iters < 1 or self.min_mode_size < 1 or self.graph_k < 1:
            raise ValueError("max_refine_iters, min_mode_size and graph_k must be >= 1")
        if not 0 < self.jaccard_stop <= 1:
            raise ValueError("jaccard_stop must lie in (0, 1]")


@dataclass
class RefineStep:
    iteration: int
    features: list[int]
    m_star: int
    n_queries: int
    ranked_features: list[int]
    w_eff: list[float]
    curve: list[dict]
    jaccard_prev: float | None = None
    relocalized_pruned: int | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ModeAttribution:
    direction: str
    mode_index: int
    size: int
    support: list[int]
    steps: list[RefineStep]
    stop_reason: str
    final_queries: list[int]  # cohort-local ids
    final_pruned: list[int]  # cohort-local ids of the last localisation in this direction
    cv_score: float

    def to_json(self) -> dict:
        out = asdict(self)
        out["steps"] = [s.to_json() for s in self.steps]
        return out


def _cohort_mask(n_X: int, n_Y: int, cohort: int) -> np.ndarray:
    mask = np.zeros(n_X + n_Y, dtype=bool)
    if cohort == Y_LABEL:
        mask[n_X:] = True
    else:
        mask[:n_X] = True
    return mask


def _to_pooled(local_ids, cohort: int, n_X: int) -> np.ndarray:
    ids = np.asarray(local_ids, dtype=np.int64)
    return ids + n_X if cohort == Y_LABEL else ids


def _to_local(pooled_ids, cohort: int, n_X: int) -> list[int]:
    ids = np.asarray(pooled_ids, dtype=np.int64)
    return sorted(int(i) for i in (ids - n_X if cohort == Y_LABEL else ids))


def refine_mode(
    U: np.ndarray,
    n_X: int,
    cohort: int,
    queries: np.ndarray,
    train_cfg: TrainConfig,
    eq_params: EqualizeParams,
    refine_cfg: RefineConfig,
    seed: int,
    initial_pruned: np.ndarray | None = None,
    mode_index: int = 0,
) -> ModeAttribution:
    """Attribute one mode (pooled ids ``queries`` from ``cohort``) to a feature subset."""
    n = U.shape[0]
    n_Y = n - n_X
    target = _cohort_mask(n_X, n_Y, cohort)
    features = np.arange(U.shape[1])
    queries = np.unique(np.asarray(queries, dtype=np.int64))
    pruned_dir = np.asarray(initial_pruned if initial_pruned is not None else queries, dtype=np.int64)
    size = len(queries)
    steps: list[RefineStep] = []
    stop = "max_iters"
    prev_support = None
    cv_score = float("nan")
    for it in range(1, refine_cfg.max_refine_iters + 1):
        qmask = np.zeros(n, dtype=bool)
        qmask[queries] = True
        masks = SubspaceMasks(target, qmask)
        Usub = np.ascontiguousarray(U[:, features])
        w = train_weights(Usub, masks, train_cfg)
        m_star, sel, curve = select_subset(Usub, masks, w, train_cfg)
        support = features[sel]
        best = next(c for c in curve if c.m == m_star)
        cv_score = best.mean_score
        step = RefineStep(
            iteration=it,
            features=[int(f) for f in support],
            m_star=int(m_star),
            n_queries=int(len(queries)),
            ranked_features=[int(features[j]) for j in w.ranking()],
            w_eff=[float(v) for v in w.w_eff],
            curve=[c.to_json() for c in curve],
        )
        steps.append(step)
        if prev_support is not None:
            step.jaccard_prev = jaccard(prev_support, support)
            if step.jaccard_prev >= refine_cfg.jaccard_stop:
                stop = "stable"
                break
        prev_support = support
        features = support
        if not refine_cfg.relocalize:
            continue
        Us = U[:, features]
        res = equalize(Us[:n_X], Us[n_X:], eq_params, seed=seed)
        pruned_local = res.pruned(cohort)
        step.relocalized_pruned = len(pruned_local)
        if not pruned_local:
            stop = "no_shift_in_subspace"
            break
        pruned_dir = _to_pooled(pruned_local, cohort, n_X)
        part = partition_modes(pruned_dir, np.ascontiguousarray(Us), refine_cfg.graph_k)
        overlaps = [np.intersect1d(m, queries).size for m in part.modes]
        best_mode = int(np.argmax(overlaps))
        if overlaps[best_mode] == 0:
            stop = "mode_lost"
            break
        new_queries = part.modes[best_mode]
        if len(new_queries) < train_cfg.n_splits:
            stop = "mode_too_small"
            break
        queries = new_queries
    return ModeAttribution(
        direction=cohort_name(cohort),
        mode_index=mode_index,
        size=size,
        support=[int(f) for f in steps[-1].features],
        steps=steps,
        stop_reason=stop,
        final_queries=_to_local(queries, cohort, n_X),
        final_pruned=_to_local(pruned_dir, cohort, n_X),
        cv_score=float(cv_score),
    )


def refine_loop(
    X: FeatureMatrix | np.ndarray,
    Y: FeatureMatrix | np.ndarray,
    eq: EqualizationResult,
    train_cfg: TrainConfig | None = None,
    eq_params: EqualizeParams | None = None,
    refine_cfg: RefineConfig | None = None,
    seed: int = 0,
) -> list[ModeAttribution]:
    """Attribute every mode of both pruned sets that has at least ``min_mode_size`` points."""
    train_cfg = train_cfg or TrainConfig()
    eq_params = eq_params or EqualizeParams()
    refine_cfg = refine_cfg or RefineConfig()
    xv = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    yv = Y.values if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=np.float64)
    if not eq.pruned_X and not eq.pruned_Y:
        raise EmptyPrunedSet("nothing was pruned in either direction")
    U = np.ascontiguousarray(np.vstack([xv, yv]))
    n_X = len(xv)
    out = []
    for cohort in (Y_LABEL, X_LABEL):
        local = eq.pruned(cohort)
        if not local:
            continue
        pooled = _to_pooled(local, cohort, n_X)
        part = partition_modes(pooled, U, refine_cfg.graph_k)
        for k, mode in enumerate(part.modes):
            if len(mode) < max(refine_cfg.min_mode_size, train_cfg.n_splits):
                continue
            out.append(
                refine_mode(U, n_X, cohort, mode, train_cfg, eq_params, refine_cfg, seed, pooled, k)
            )
    return out


# -- run configuration and reports -----------------------------------------


@dataclass
class RunConfig:
    source: str = "global"  # "global", "local" or "csv"
    sigma: float = 0.3
    n_inject: int = 300
    n: int = 10_000
    x_path: str | None = None
    y_path: str | None = None
    truth_path: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    equalize: EqualizeParams = field(default_factory=EqualizeParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    run_baseline: bool = False
    recall_k: int = 400
    allow_max_iters: bool = False

    def __post_init__(self) -> None:
        if self.source not in ("global", "local", "csv"):
            raise InvalidSpec(f"unknown source {self.source!r}")
        if self.source == "csv" and not (self.x_path and self.y_path):
            raise InvalidSpec("csv source needs both x_path and y_path")
        if self.source != "csv" and (self.x_path or self.y_path):
            raise InvalidSpec("give either a benchmark spec or CSV paths, not both")
        if not self.seeds:
            raise InvalidSpec("at least one seed is required")
        if self.sigma < 0:
            raise InvalidSpec(f"sigma must be >= 0, got {self.sigma}")
        if self.n < 1 or self.n_inject < 1:
            raise InvalidSpec("n and n_inject must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp"]["hidden"] = list(self.mlp.hidden)
        return d

    def sweep_value(self):
        return {"global": self.sigma, "local": self.n_inject}.get(self.source)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def load_inputs(cfg: RunConfig, seed: int):
    """Return ``(X, Y, truth)``; ``truth`` is a dict or ``None``."""
    import json

    if cfg.source == "global":
        X, Y, spec = make_global_pair(cfg.sigma, cfg.n, seed)
        return X, Y, {**spec.to_json(), "seed": seed, "n": cfg.n}
    if cfg.source == "local":
        X, Y, injected, spec = make_local_pair(cfg.n_inject, cfg.n, seed)
        return X, Y, {**spec.to_json(), "seed": seed, "n": cfg.n, "injected_ids": injected.tolist()}
    X, Y = load_csv(cfg.x_path), load_csv(cfg.y_path)
    truth = None
    if cfg.truth_path:
        with open(cfg.truth_path) as fh:
            truth = json.load(fh)
    return X, Y, truth


def _jaccard_matrix(supports: list[list[int]]) -> list[list[float]]:
    return [[jaccard(a, b) for b in supports] for a in supports]


def run_seed(cfg: RunConfig, seed: int) -> tuple[dict, dict]:
    """One seed of the pipeline. Returns ``(report section, wall times)``."""
    timing = {}
    t0 = time.perf_counter()
    X, Y, truth = _stage("load", load_inputs, cfg, seed)
    Xs, Ys, stats = _stage("standardize", standardize, X, Y)
    timing["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    eq = _stage("equalize", equalize, Xs, Ys, cfg.equalize, seed)
    timing["equalize"] = time.perf_counter() - t0
    if eq.max_iters_hit and not cfg.allow_max_iters:
        raise StageError("equalize", MaxItersExceeded(f"seed {seed}: no convergence after {eq.outer_iters} iterations"))

    t0 = time.perf_counter()
    attributions: list[ModeAttribution] = []
    if eq.pruned_X or eq.pruned_Y:
        attributions = _stage("attribute", refine_loop, Xs, Ys, eq, cfg.train, cfg.equalize, cfg.refine, seed)
    timing["attribute"] = time.perf_counter() - t0

    names = Xs.feature_names
    shift_set = sorted(set().union(*[set(a.support) for a in attributions])) if attributions else []
    dominant = max(attributions, key=lambda a: (len(a.final_queries), a.direction == "Y", -a.mode_index), default=None)
    metrics = {
        "pruned_to_total": eq.pruned_to_total(),
        "n_pruned_X": len(eq.pruned_X),
        "n_pruned_Y": len(eq.pruned_Y),
        "n_modes_attributed": len(attributions),
        "dominant_mode": None if dominant is None else attributions.index(dominant),
        "dominant_support": [] if dominant is None else dominant.support,
    }
    injected = None if truth is None else truth.get("injected_ids")
    if injected:
        metrics["pruned_to_injected_initial"] = eq.pruned_to_injected(injected, "Y")
        y_attr = [a for a in attributions if a.direction == "Y"]
        refined = set(eq.pruned_Y)
        if cfg.refine.relocalize and y_attr:
            refined = set().union(*[set(a.final_pruned) for a in y_attr])
        metrics["pruned_to_injected"] = len(refined.intersection(injected)) / len(injected)
        if cfg.run_baseline:
            t0 = time.perf_counter()
            model = _stage("baseline", train_mlp, Xs, Ys, replace(cfg.mlp, seed=seed))
            ranking = rank_by_ratio(model, Ys)
            metrics[f"injected_recall_at_{cfg.recall_k}"] = injected_recall_at(ranking, injected, cfg.recall_k)
            timing["baseline"] = time.perf_counter() - t0

    section = {
        "seed": seed,
        "truth": truth,
        "standardization": {"constant_features": [int(j) for j in stats.constant_features]},
        "equalization": eq.to_json(include_trace=True),
        "attributions": [a.to_json() for a in attributions],
        "feature_names": list(names),
        "shift_set": shift_set,
        "shift_set_names": [names[j] for j in shift_set],
        "jaccard_matrix": _jaccard_matrix([a.support for a in attributions]),
        "metrics": metrics,
    }
    return section, timing


def inclusion_frequency(shift_sets: list[list[int]], d: int) -> list[float]:
    counts = np.zeros(d)
    for s in shift_sets:
        counts[list(s)] += 1
    return (counts / max(1, len(shift_sets))).tolist()


def summarize(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "p25": None, "p75": None, "n": 0}
    return {
        "mean": float(v.mean()),
        "p25": float(np.percentile(v, 25)),
        "p75": float(np.percentile(v, 75)),
        "n": int(v.size),
    }


def run_pipeline(cfg: RunConfig, jobs: int = 1) -> dict:
    """Run every seed and assemble the versioned report (wall times under ``"timing"``).

    ``jobs > 1`` runs seeds in separate processes; seeds share no state, so the
    report is the same as a sequential run.
    """
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = []
        for seed in cfg.seeds:
            logger.info("seed %d", seed)
            results.append(run_seed(cfg, seed))
    sections = [r[0] for r in results]
    timing = {str(seed): r[1] for seed, r in zip(cfg.seeds, results)}
    names = sections[0]["feature_names"]
    metric_keys = sorted({k for s in sections for k, v in s["metrics"].items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
    report = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "backend": kernels.BACKEND},
        "config": cfg.to_json(),
        "sweep_value": cfg.sweep_value(),
        "feature_names": names,
        "seeds": sections,
        "inclusion_frequency": dict(zip(names, inclusion_frequency([s["shift_set"] for s in sections], len(names)))),
        "summary": {k: summarize(s["metrics"].get(k) for s in sections) for k in metric_keys},
        "timing": timing,
    }
    return report
