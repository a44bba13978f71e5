"""Command-line interface.

Subcommands: bench-gen, score, equalize, attribute, pipeline, baseline, aggregate.
Settings come from an optional YAML file (``--config``) and are overridden
by flags. The output directory defaults to ``$DOMAINSHIFT_OUTPUT_DIR`` or
``./out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baseline import MlpConfig, injected_recall_at, rank_by_ratio, train_mlp
from .benchgen import make_global_pair, make_local_pair
from .dataset import PooledIndex, load_csv, save_csv, standardize
from .equalize import EqualizationResult, EqualizeParams, equalize
from .errors import DomainShiftError, InvalidSpec, MaxItersExceeded, SchemaMismatch, StageError
from .pipeline import (
    SCHEMA_VERSION,
    RefineConfig,
    RunConfig,
    inclusion_frequency,
    refine_loop,
    run_pipeline,
    summarize,
)
from .score import calibrate_null, flag_threshold, score_cohort
from .subspace import TrainConfig

logger = logging.getLogger("domainshift")

OUTPUT_ENV = "DOMAINSHIFT_OUTPUT_DIR"

# seed sweeps used when neither --seeds nor the config file names any
DEFAULT_SEEDS = {"global": list(range(11)), "local": list(range(5)), "csv": [0]}

# config-file keys -> (section, dataclass field)
CONFIG_KEYS = {
    "scoring": {"K_M": "K_M", "n_mc": "n_mc", "p_ext": "p_ext"},
    "equalization": {
        "q_tail": "q_tail",
        "alpha": "alpha",
        "prune_batch": "prune_batch",
        "max_outer_iters": "max_outer_iters",
        "min_tail": "min_tail",
    },
    "subspace": {
        "K": "K",
        "beta": "beta",
        "T": "epochs",
        "B": "batch_size",
        "pos_frac": "pos_frac",
        "tau_start": "tau_start",
        "tau_end": "tau_end",
        "lr": "lr",
        "l1": "l1",
        "n_splits": "n_splits",
    },
    "refine": {
        "max_refine_iters": "max_refine_iters",
        "jaccard_stop": "jaccard_stop",
        "relocalize": "relocalize",
        "min_mode_size": "min_mode_size",
    },
    "mlp": {"hidden": "hidden", "lr": "lr", "l2": "l2", "batch_size": "batch_size", "max_iters": "max_iters"},
}


# -- json / csv helpers ----------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n")


def write_rows(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


# -- configuration ---------------------------------------------------------


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    unknown = set(data) - set(CONFIG_KEYS) - {"seeds", "bench", "recall_k"}
    if unknown:
        raise InvalidSpec(f"unknown config sections: {sorted(unknown)}")
    for section, keys in CONFIG_KEYS.items():
        extra = set(data.get(section) or {}) - set(keys)
        if extra:
            raise InvalidSpec(f"unknown keys in {section}: {sorted(extra)}")
    return data


def _file_values(conf: dict) -> dict:
    """Flatten a config mapping to ``{(section, field): value}``."""
    out = {}
    for section, keys in CONFIG_KEYS.items():
        for key, value in (conf.get(section) or {}).items():
            out[(section, keys[key])] = value
    return out


# flag dest -> (section, field)
FLAG_TARGETS = {
    "k_max": ("scoring", "K_M"),
    "n_mc": ("scoring", "n_mc"),
    "p_ext": ("scoring", "p_ext"),
    "q_tail": ("equalization", "q_tail"),
    "alpha": ("equalization", "alpha"),
    "prune_batch": ("equalization", "prune_batch"),
    "max_outer_iters": ("equalization", "max_outer_iters"),
    "min_tail": ("equalization", "min_tail"),
    "K": ("subspace", "K"),
    "beta": ("subspace", "beta"),
    "epochs": ("subspace", "epochs"),
    "batch": ("subspace", "batch_size"),
    "pos_frac": ("subspace", "pos_frac"),
    "tau_start": ("subspace", "tau_start"),
    "tau_end": ("subspace", "tau_end"),
    "lr": ("subspace", "lr"),
    "l1": ("subspace", "l1"),
    "folds": ("subspace", "n_splits"),
    "max_refine_iters": ("refine", "max_refine_iters"),
    "min_mode_size": ("refine", "min_mode_size"),
    "mlp_iters": ("mlp", "max_iters"),
}


def resolve_settings(args) -> dict:
    values = _file_values(load_config(getattr(args, "config", None)))
    for dest, target in FLAG_TARGETS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[target] = v
    if getattr(args, "no_relocalize", False):
        values[("refine", "relocalize")] = False
    return values


def _build(cls, values: dict, sections: tuple[str, ...], **extra):
    names = {f.name for f in fields(cls)}
    kw = {fname: v for (sec, fname), v in values.items() if sec in sections and fname in names}
    kw.update(extra)
    return cls(**kw)


def equalize_params(values: dict) -> EqualizeParams:
    return _build(EqualizeParams, values, ("scoring", "equalization"))


def train_config(values: dict, seed: int) -> TrainConfig:
    return _build(TrainConfig, values, ("subspace",), seed=seed)


def refine_config(values: dict) -> RefineConfig:
    return _build(RefineConfig, values, ("refine",))


def mlp_config(values: dict, seed: int) -> MlpConfig:
    return _build(MlpConfig, values, ("mlp",), seed=seed)


def output_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUTPUT_ENV) or "out"
    return Path(out)


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise InvalidSpec("no seeds given")
    return seeds


def _load_pair(args, std: bool = True):
    X, Y = load_csv(args.x), load_csv(args.y)
    if std:
        X, Y, _ = standardize(X, Y)
    return X, Y


# -- subcommands -----------------------------------------------------------


def cmd_bench_gen(args) -> int:
    out = output_dir(args)
    if args.kind == "global":
        if args.sigma is None or args.sigma < 0:
            raise InvalidSpec(f"sigma must be given and >= 0, got {args.sigma}")
        X, Y, spec = make_global_pair(args.sigma, args.n, args.seed)
        truth = spec.to_json()
    else:
        if args.inject is None or args.inject < 1:
            raise InvalidSpec(f"--inject must be a positive count, got {args.inject}")
        X, Y, injected, spec = make_local_pair(args.inject, args.n, args.seed)
        truth = {**spec.to_json(), "injected_ids": injected.tolist()}
    truth.update({"seed": args.seed, "n": args.n})
    save_csv(X, out / "X.csv")
    save_csv(Y, out / "Y.csv")
    dump_json(truth, out / "truth.json")
    print(out / "truth.json")
    return 0


def cmd_score(args) -> int:
    values = resolve_settings(args)
    prm = equalize_params(values)
    X, Y = _load_pair(args)
    idx = PooledIndex(X, Y)
    sc = score_cohort(idx, args.test, prm.K_M)
    null = calibrate_null(prm.K_M, sc.p_hat, prm.n_mc, args.seed)
    thr = flag_threshold(null, values.get(("scoring", "p_ext"), 1e-5))
    local = sc.ids - (idx.n_X if args.test == "Y" else 0)
    rows = [
        {"id": int(i), "score": float(v), "argmax_k": int(k), "n_used": int(u), "flagged": bool(v >= thr)}
        for i, v, k, u in zip(local, sc.values, sc.argmax_k, sc.n_used)
    ]
    out = output_dir(args)
    write_rows(rows, out / f"scores_{args.test}.csv")
    dump_json(
        {"schema_version": SCHEMA_VERSION, "test": args.test, "K_M": prm.K_M, "p_hat": sc.p_hat,
         "threshold": thr, "n_flagged": sum(r["flagged"] for r in rows)},
        out / f"scores_{args.test}.json",
    )
    return 0


def cmd_equalize(args) -> int:
    values = resolve_settings(args)
    X, Y = _load_pair(args)
    res = equalize(X, Y, equalize_params(values), seed=args.seed)
    out = output_dir(args)
    dump_json({"schema_version": SCHEMA_VERSION, "equalization": res.to_json()}, out / "equalization.json")
    write_rows(res.trace_rows(), out / "equalization_trace.csv")
    print(f"pruned X={len(res.pruned_X)} Y={len(res.pruned_Y)} ratio={res.pruned_to_total():.4f}")
    if res.max_iters_hit and not args.allow_max_iters:
        raise MaxItersExceeded(f"no convergence after {res.outer_iters} outer iterations")
    return 0


def cmd_attribute(args) -> int:
    values = resolve_settings(args)
    X, Y = _load_pair(args)
    with open(args.equalization) as fh:
        data = json.load(fh)
    eq = EqualizationResult.from_json(data.get("equalization", data))
    modes = refine_loop(
        X, Y, eq, train_config(values, args.seed), equalize_params(values), refine_config(values), args.seed
    )
    out = output_dir(args)
    dump_json(
        {"schema_version": SCHEMA_VERSION, "feature_names": X.feature_names, "modes": [m.to_json() for m in modes]},
        out / "attribution.json",
    )
    rows = []
    for k, m in enumerate(modes):
        for step in m.steps:
            for c in step.curve:
                rows.append({"mode": k, "direction": m.direction, "iteration": step.iteration, "m": c["m"],
                             "mean_score": c["mean_score"], "purity_only": c["purity_only"]})
    write_rows(rows, out / "cv_curve.csv")
    for k, m in enumerate(modes):
        print(f"mode {k} ({m.direction}, {m.size} pts): {[X.feature_names[j] for j in m.support]}")
    return 0


def _run_config(args, values: dict) -> RunConfig:
    conf = load_config(getattr(args, "config", None))
    bench = conf.get("bench") or {}
    if args.x or args.y:
        source = "csv"
    else:
        source = args.bench or bench.get("kind", "global")
    seeds = parse_seeds(args.seeds) if args.seeds else conf.get("seeds") or DEFAULT_SEEDS[source]
    return RunConfig(
        source=source,
        sigma=args.sigma if args.sigma is not None else bench.get("sigma", 0.3),
        n_inject=args.inject if args.inject is not None else bench.get("inject", 300),
        n=args.n if args.n is not None else bench.get("n", 10_000),
        x_path=args.x,
        y_path=args.y,
        truth_path=args.truth,
        seeds=list(seeds),
        equalize=equalize_params(values),
        train=train_config(values, 0),
        refine=refine_config(values),
        mlp=mlp_config(values, 0),
        run_baseline=args.with_baseline,
        recall_k=args.k if args.k is not None else conf.get("recall_k", 400),
        allow_max_iters=args.allow_max_iters,
    )


def report_tables(report: dict) -> dict[str, list[dict]]:
    names = report["feature_names"]
    inclusion = [{"feature": f, "index": j, "frequency": report["inclusion_frequency"][f]} for j, f in enumerate(names)]
    metrics = []
    for s in report["seeds"]:
        row = {"seed": s["seed"]}
        row.update({k: v for k, v in s["metrics"].items() if not isinstance(v, (list, dict))})
        row["shift_set"] = " ".join(str(j) for j in s["shift_set"])
        metrics.append(row)
    return {"inclusion_frequency.csv": inclusion, "metrics.csv": metrics}


def cmd_pipeline(args) -> int:
    values = resolve_settings(args)
    cfg = _run_config(args, values)
    report = run_pipeline(cfg, jobs=args.jobs)
    out = output_dir(args)
    dump_json(report, out / "report.json")
    for name, rows in report_tables(report).items():
        write_rows(rows, out / name)
    for s in report["seeds"]:
        write_rows(EqualizationResult.from_json(s["equalization"]).trace_rows(), out / f"trace_seed{s['seed']}.csv")
        print(f"seed {s['seed']}: shift set {s['shift_set_names']}, pruned-to-total {s['metrics']['pruned_to_total']:.4f}")
    return 0


def cmd_baseline(args) -> int:
    values = resolve_settings(args)
    if not args.truth:
        raise InvalidSpec("baseline recall needs the injected ids: pass --truth truth.json")
    with open(args.truth) as fh:
        truth = json.load(fh)
    injected = truth.get("injected_ids")
    if not injected:
        raise InvalidSpec("truth file has no injected_ids; recall is only defined for localized shifts")
    X, Y = _load_pair(args)
    model = train_mlp(X, Y, mlp_config(values, args.seed))
    ranking = rank_by_ratio(model, Y)
    k = args.k if args.k is not None else 400
    recall = injected_recall_at(ranking, injected, k)
    out = output_dir(args)
    write_rows(ranking.rows(), out / "ratio_ranking.csv")
    dump_json({"schema_version": SCHEMA_VERSION, "k": k, "injected_recall": recall, "seed": args.seed},
              out / "baseline.json")
    print(f"InjectedRecall@{k} = {recall:.4f}")
    return 0


def _comparable(cfg: dict) -> dict:
    c = json.loads(json.dumps(cfg))
    for key in ("seeds", "sigma", "n_inject", "x_path", "y_path", "truth_path"):
        c.pop(key, None)
    return c


def aggregate_reports(reports: list[dict], force: bool = False) -> dict:
    """Inclusion frequencies and ratio bands per sweep value across reports."""
    if not reports:
        raise InvalidSpec("need at least one report")
    versions = {r.get("schema_version") for r in reports}
    if len(versions) != 1:
        raise SchemaMismatch(f"reports use different schema versions: {sorted(map(str, versions))}")
    base = _comparable(reports[0]["config"])
    if not force and any(_comparable(r["config"]) != base for r in reports[1:]):
        raise SchemaMismatch("reports come from different configurations (use --force to combine anyway)")
    names = reports[0]["feature_names"]
    groups: dict = {}
    for r in reports:
        groups.setdefault(r.get("sweep_value"), []).extend(
            {**s, "_source": r.get("_source")} for s in r["seeds"]
        )
    inclusion, bands = [], []
    for value in sorted(groups, key=lambda v: (v is None, v)):
        secs = groups[value]
        freq = inclusion_frequency([s["shift_set"] for s in secs], len(names))
        for j, f in enumerate(names):
            inclusion.append({"sweep_value": value, "feature": f, "index": j, "frequency": freq[j], "n_seeds": len(secs)})
        keys = sorted({k for s in secs for k, v in s["metrics"].items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
        for k in keys:
            st = summarize(s["metrics"].get(k) for s in secs)
            bands.append({"sweep_value": value, "metric": k, **st})
    return {
        "schema_version": SCHEMA_VERSION,
        "sources": [r.get("_source") for r in reports],
        "inclusion_frequency": inclusion,
        "bands": bands,
    }


def cmd_aggregate(args) -> int:
    reports = []
    for p in args.reports:
        with open(p) as fh:
            r = json.load(fh)
        r["_source"] = str(p)
        reports.append(r)
    agg = aggregate_reports(reports, force=args.force)
    out = output_dir(args)
    dump_json(agg, out / "aggregate.json")
    write_rows(agg["inclusion_frequency"], out / "inclusion_frequency_by_value.csv")
    write_rows(agg["bands"], out / "ratio_bands.csv")
    return 0


# -- parser ----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML settings file")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_inputs(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--x", required=required, help="CSV of cohort X")
    p.add_argument("--y", required=required, help="CSV of cohort Y")


def _add_scoring(p) -> None:
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--n-mc", dest="n_mc", type=int)
    p.add_argument("--p-ext", dest="p_ext", type=float)


def _add_equalize(p) -> None:
    _add_scoring(p)
    p.add_argument("--q-tail", dest="q_tail", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--prune-batch", dest="prune_batch", type=int)
    p.add_argument("--max-outer-iters", dest="max_outer_iters", type=int)
    p.add_argument("--min-tail", dest="min_tail", type=int)
    p.add_argument("--allow-max-iters", action="store_true", help="exit 0 even if equalization hits its iteration cap")


def _add_subspace(p) -> None:
    p.add_argument("--K", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--pos-frac", dest="pos_frac", type=float)
    p.add_argument("--tau-start", dest="tau_start", type=float)
    p.add_argument("--tau-end", dest="tau_end", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--l1", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--max-refine-iters", dest="max_refine_iters", type=int)
    p.add_argument("--min-mode-size", dest="min_mode_size", type=int)
    p.add_argument("--no-relocalize", action="store_true", help="refine without re-running localisation in the subspace")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainshift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-gen", help="write a synthetic benchmark pair and its ground truth")
    p.add_argument("kind", choices=["global", "local"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--inject", type=int)
    p.add_argument("--n", type=int, default=50_000)
    _add_common(p)
    p.set_defaults(func=cmd_bench_gen)

    p = sub.add_parser("score", help="anomaly scores of one cohort")
    _add_inputs(p)
    p.add_argument("--test", choices=["X", "Y"], default="Y")
    _add_scoring(p)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("equalize", help="bidirectional equalization")
    _add_inputs(p)
    _add_equalize(p)
    _add_common(p)
    p.set_defaults(func=cmd_equalize)

    p = sub.add_parser("attribute", help="feature attribution of the pruned modes")
    _add_inputs(p)
    p.add_argument("--equalization", required=True, help="equalization.json from the equalize command")
    _add_equalize(p)
    _add_subspace(p)
    _add_common(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("pipeline", help="full run over one or more seeds")
    _add_inputs(p, required=False)
    p.add_argument("--truth", help="truth JSON for CSV inputs")
    p.add_argument("--bench", choices=["global", "local"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--inject", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seeds", help="comma list or ranges, e.g. 0-4")
    p.add_argument("--with-baseline", action="store_true", help="also train the classifier baseline")
    p.add_argument("--k", type=int, help="recall cutoff for the baseline (default 400)")
    p.add_argument("--mlp-iters", dest="mlp_iters", type=int)
    p.add_argument("--jobs", type=int, default=1, help="run seeds in this many worker processes")
    _add_equalize(p)
    _add_subspace(p)
    _add_common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("baseline", help="classifier posterior-odds ranking and InjectedRecall@k")
    _add_inputs(p)
    p.add_argument("--truth")
    p.add_argument("--k", type=int)
    p.add_argument("--mlp-iters", dest="mlp_iters", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("aggregate", help="combine run reports across seeds and sweep values")
    p.add_argument("reports", nargs="+")
    p.add_argument("--force", action="store_true", help="combine reports from different configurations")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except MaxItersExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        if isinstance(exc.cause, MaxItersExceeded):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DomainShiftError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
