"""Command-line entry point.

Subcommands:
    sample    warmup then sampling; writes draws.csv, stats.csv, summary.json
    tune      warmup only; writes tuned.json
    validate  run one (or all) of the property suites
    compare   two sampler configs at a matched gradient budget

Settings come from defaults, then an optional flat ``key = value`` config
file, then flags. The default output directory can be set with the
WALNUTS_OUTPUT_DIR environment variable.

Exit codes: 0 success, 1 check failure, 2 usage error.
"""

import argparse
import csv
import inspect
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import oracles
from .adapt import AdaptConfig, warmup
from .diagnostics import STATS_COLUMNS, matched_nuts_step, stats_rows, summarize
from .integrator import MicroDistribution
from .phase import MassMatrix
from .sampler import ChainStreams, WalnutsConfig, make_kernel
from .targets import FunnelTarget, GaussianTarget, StockWatsonTarget, load_series_csv, stock_watson_simulate

log = logging.getLogger("walnuts")

SCHEMA_VERSION = 1
SAMPLERS = ("walnuts_r2p", "walnuts_d", "nuts", "bphmc", "exact_bp")
TARGETS = ("std_gaussian", "gaussian", "funnel", "stock_watson")
OUTPUT_ENV = "WALNUTS_OUTPUT_DIR"

DEFAULTS = {
    "target": "std_gaussian",
    "dim": 10,
    "d": 10,
    "scales": None,
    "data": None,
    "series_length": 200,
    "series_sigma": 0.2,
    "series_seed": 0,
    "mass_matrix": None,
    "sampler": "walnuts_r2p",
    "h": 0.5,
    "delta": 0.3,
    "m_max": 10,
    "jitter": 0.2,
    "jitter_mode": "per_transition",
    "energy_error_mode": "envelope",
    "min_halvings": 0,
    "halvings_cap": 20,
    "chains": 1,
    "iters": 1000,
    "warmup": 0,
    "adapt": True,
    "energy_budget": 0.6,
    "p_a": 0.95,
    "gamma": 0.8,
    "seed": 0,
    "thin": 1,
    "workers": 1,
    "out": None,
}


class UsageError(Exception):
    pass


def _to_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _to_float(text):
    return math.inf if str(text).strip().lower() in ("inf", "infinity") else float(text)


def _to_scales(text):
    if text is None or isinstance(text, (list, tuple)):
        return text
    return [float(v) for v in str(text).replace(",", " ").split()]


CONVERTERS = {
    "dim": int, "d": int, "series_length": int, "series_seed": int, "m_max": int,
    "min_halvings": int, "halvings_cap": int, "chains": int, "iters": int, "warmup": int,
    "seed": int, "thin": int, "workers": int,
    "series_sigma": float, "h": float, "delta": _to_float, "jitter": float,
    "energy_budget": float, "p_a": float, "gamma": float,
    "adapt": _to_bool, "scales": _to_scales,
}


def read_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_settings(file_values=None, flag_values=None):
    """defaults < config file < flags, with types coerced and checked."""
    merged = dict(DEFAULTS)
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if value is None:
                continue
            merged[key] = value
    for key, conv in CONVERTERS.items():
        if merged[key] is not None and isinstance(merged[key], str):
            try:
                merged[key] = conv(merged[key])
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {merged[key]!r}") from exc
    validate_settings(merged)
    return merged


def validate_settings(s):
    if s["target"] not in TARGETS:
        raise UsageError(f"unknown target {s['target']!r}; choose from {', '.join(TARGETS)}")
    if s["sampler"] not in SAMPLERS:
        raise UsageError(f"unknown sampler {s['sampler']!r}; choose from {', '.join(SAMPLERS)}")
    for key in ("chains", "iters", "thin", "workers", "dim", "d"):
        if s[key] < 1:
            raise UsageError(f"{key} must be at least 1")
    if s["warmup"] < 0:
        raise UsageError("warmup must be nonnegative")
    if not s["h"] > 0:
        raise UsageError("h must be positive")
    if not s["delta"] > 0:
        raise UsageError("delta must be positive")
    for key in ("data", "mass_matrix"):
        if s[key] is not None and not Path(s[key]).is_file():
            raise UsageError(f"{key} file not found: {s[key]}")
    if s["sampler"] == "exact_bp" and s["target"] not in ("std_gaussian", "gaussian"):
        raise UsageError("exact_bp needs a Gaussian target")


def build_target(s):
    name = s["target"]
    if name == "std_gaussian":
        return GaussianTarget(s["dim"])
    if name == "gaussian":
        scales = s["scales"] or list(np.linspace(1.0, 10.0, s["dim"]))
        return GaussianTarget(len(scales), scales=scales)
    if name == "funnel":
        return FunnelTarget(s["d"])
    if s["data"] is not None:
        y = load_series_csv(s["data"])
    else:
        y, _ = stock_watson_simulate(s["series_length"], s["series_sigma"], s["series_seed"])
    return StockWatsonTarget(y)


def build_mass_matrix(s, dim):
    if s["mass_matrix"] is None:
        return MassMatrix.identity(dim)
    M = MassMatrix.from_csv(s["mass_matrix"])
    if M.dim != dim:
        raise UsageError(f"mass matrix has dimension {M.dim}, target has {dim}")
    return M


def _walnuts_config(s):
    dist = MicroDistribution.randomized_two_point() if s["sampler"] == "walnuts_r2p" else MicroDistribution.deterministic()
    return WalnutsConfig(
        h=s["h"], delta=s["delta"], m_max=s["m_max"], micro_dist=dist, jitter=s["jitter"],
        jitter_mode=s["jitter_mode"], energy_error_mode=s["energy_error_mode"],
        min_halvings=s["min_halvings"], halvings_cap=s["halvings_cap"],
    )


def _kernel(s, model, M, h, delta):
    options = {}
    if s["sampler"].startswith("walnuts"):
        options = dict(
            jitter_mode=s["jitter_mode"], energy_error_mode=s["energy_error_mode"],
            min_halvings=s["min_halvings"], halvings_cap=s["halvings_cap"],
        )
    return make_kernel(s["sampler"], model, M, h, s["m_max"], delta, s["jitter"], **options)


def _warmup_chain(s, model, M, streams, theta):
    """Returns (h, delta, theta, warmup record, transitions used)."""
    if s["warmup"] == 0:
        return s["h"], s["delta"], theta, None, 0
    if s["sampler"].startswith("walnuts") and s["adapt"]:
        acfg = AdaptConfig(energy_budget=s["energy_budget"], p_a=s["p_a"], gamma=s["gamma"], warmup_iters=s["warmup"])
        cfg, theta, trace = warmup(model, M, _walnuts_config(s), acfg, theta, streams)
        record = {"deltas": trace.deltas, "steps": trace.steps, "no_halving": trace.no_halving, "windows": trace.window_sizes}
        return cfg.h, cfg.delta, theta, record, trace.transitions
    kernel = _kernel(s, model, M, s["h"], s["delta"])
    for it in range(s["warmup"]):
        theta, _ = kernel(theta, streams.transition(it))
    return s["h"], s["delta"], theta, None, s["warmup"]


def run_one_chain(s, chain, sample=True, budget=None):
    """Run warmup and sampling for one chain; safe to call in a worker.

    With ``budget`` the sampling phase stops once that many gradients have
    been spent (``iters`` is then an upper bound).
    """
    model = build_target(s)
    M = build_mass_matrix(s, model.dim)
    streams = ChainStreams(s["seed"], chain)
    theta = model.initial_point(streams.initial())
    h, delta, theta, record, used = _warmup_chain(s, model, M, streams, theta)
    result = {"chain": chain, "h": h, "delta": delta, "warmup": record, "draws": np.empty((0, model.dim)), "stats": []}
    if not sample:
        return result
    kernel = _kernel(s, model, M, h, delta)
    draws, stats = [], []
    spent = 0
    it = 0
    limit = s["iters"] if budget is None else math.inf
    while it < limit:
        theta, st = kernel(theta, streams.transition(used + it))
        it += 1
        if budget is not None and spent + st.grads > budget:
            break
        spent += st.grads
        stats.append(st)
        if it % s["thin"] == 0:
            draws.append(theta)
    result["draws"] = np.array(draws).reshape(len(draws), model.dim)
    result["stats"] = stats
    return result


def run_chains(s, sample=True, budget=None):
    chains = range(s["chains"])
    if s["workers"] > 1 and s["chains"] > 1:
        with ProcessPoolExecutor(max_workers=min(s["workers"], s["chains"])) as pool:
            return list(pool.map(run_one_chain, [s] * s["chains"], chains, [sample] * s["chains"], [budget] * s["chains"]))
    return [run_one_chain(s, c, sample, budget) for c in chains]


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_draws(path, names, results):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for res in results:
            for row in res["draws"]:
                writer.writerow([repr(float(v)) for v in row])


def write_stats(path, results, include_coord):
    columns = ["chain"] + STATS_COLUMNS + (["min_omega", "max_omega"] if include_coord else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for res in results:
            for row in stats_rows(res["stats"], include_coord):
                row["chain"] = res["chain"]
                writer.writerow([_fmt(row[c]) for c in columns])


def _clean(obj):
    """Make an object strict-JSON safe (NaN and inf become null)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _output_dir(s):
    out = s["out"] or os.environ.get(OUTPUT_ENV) or "walnuts_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _chain_summary(model, results):
    stats = [st for res in results for st in res["stats"]]
    chains = [res["draws"] for res in results]
    if sum(len(c) for c in chains) == 0:
        raise UsageError("no draws retained; increase iters or lower thin")
    return summarize(chains, stats, model.param_names)


def _tuned(results):
    return [{"chain": r["chain"], "h": r["h"], "delta": r["delta"], "warmup": r["warmup"]} for r in results]


# ---------------------------------------------------------------- subcommands


def cmd_sample(s):
    model = build_target(s)
    out = _output_dir(s)
    start = time.perf_counter()
    results = run_chains(s)
    wall = time.perf_counter() - start
    write_draws(out / "draws.csv", model.param_names, results)
    write_stats(out / "stats.csv", results, include_coord=s["target"] == "funnel")
    summary = _chain_summary(model, results)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "sample",
        "config": s,
        "tuned": _tuned(results),
        "total_gradients": summary["total_gradients"],
        "wall_time_s": wall,
        "summary": summary,
        "warning": None,
    }
    if summary["divergent_fraction"] > 0.5:
        report["warning"] = f"DIVERGENCE STORM: {summary['divergent_fraction']:.1%} of transitions ended in a divergent macro step"
        log.warning(report["warning"])
    (out / "summary.json").write_text(json.dumps(_clean(report), indent=2) + "\n")
    print(f"wrote {out / 'draws.csv'}, {out / 'stats.csv'}, {out / 'summary.json'}")
    print(f"gradients={summary['total_gradients']} ess(|theta|^2)/1000 grads={summary['ess_sq_norm_per_1000_grads']:.4g} wall={wall:.2f}s")
    return 0


def cmd_tune(s):
    if s["warmup"] < 1:
        raise UsageError("tune needs warmup >= 1")
    out = _output_dir(s)
    start = time.perf_counter()
    results = run_chains(s, sample=False)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "tune",
        "config": s,
        "tuned": _tuned(results),
        "wall_time_s": time.perf_counter() - start,
    }
    (out / "tuned.json").write_text(json.dumps(_clean(report), indent=2) + "\n")
    for r in results:
        print(f"chain {r['chain']}: h={r['h']:.6g} delta={r['delta']:.6g}")
    return 0


def cmd_validate(suite, options):
    names = list(oracles.SUITES) if suite == "all" else [suite]
    if suite != "all" and suite not in oracles.SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from all, {', '.join(oracles.SUITES)}")
    failed = 0
    for name in names:
        check = oracles.SUITES[name]
        accepted = inspect.signature(check).parameters
        kwargs = {k: v for k, v in options.items() if v is not None and k in accepted}
        start = time.perf_counter()
        for res in check(**kwargs):
            print(res.line())
            failed += not res.passed
        print(f"  [{name}: {time.perf_counter() - start:.1f}s]")
    return 1 if failed else 0


def _side_summary(label, s, model, results):
    summary = _chain_summary(model, results)
    draws = np.concatenate([r["draws"] for r in results], axis=0)
    return {
        "label": label,
        "sampler": s["sampler"],
        "h": results[0]["h"],
        "delta": results[0]["delta"],
        "transitions": sum(len(r["stats"]) for r in results),
        "total_gradients": summary["total_gradients"],
        "ess_sq_norm_per_1000_grads": summary["ess_sq_norm_per_1000_grads"],
        "min": dict(zip(model.param_names, draws.min(axis=0).tolist())),
        "max": dict(zip(model.param_names, draws.max(axis=0).tolist())),
        "q01": dict(zip(model.param_names, np.quantile(draws, 0.01, axis=0).tolist())),
        "q99": dict(zip(model.param_names, np.quantile(draws, 0.99, axis=0).tolist())),
        "terminations": summary["terminations"],
    }


def cmd_compare(sa, sb, budget, match_nuts_step, out):
    """Run A, then B until it has spent the same gradients per chain."""
    model_a, model_b = build_target(sa), build_target(sb)
    if model_a.dim != model_b.dim:
        raise UsageError("configs target different dimensions")
    if budget is not None and budget < 1:
        raise UsageError("budget must be positive")
    start = time.perf_counter()
    res_a = run_chains(sa, budget=budget)
    if any(not r["stats"] for r in res_a):
        raise UsageError(f"budget {budget} is smaller than one transition of config A")
    if match_nuts_step:
        stats = [st for r in res_a for st in r["stats"]]
        sb = dict(sb, h=matched_nuts_step(stats))
        log.info("matched NUTS step h=%.6g", sb["h"])
    per_chain = budget if budget is not None else int(np.mean([sum(st.grads for st in r["stats"]) for r in res_a]))
    sb = dict(sb, iters=max(sb["iters"], 1))
    res_b = run_chains(sb, budget=per_chain)
    if any(not r["stats"] for r in res_b):
        raise UsageError(f"budget {per_chain} is smaller than one transition of config B")
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "compare",
        "budget_per_chain": per_chain,
        "wall_time_s": time.perf_counter() - start,
        "a": _side_summary("A", sa, model_a, res_a),
        "b": _side_summary("B", sb, model_b, res_b),
    }
    path = Path(out or os.environ.get(OUTPUT_ENV) or "walnuts_out")
    path.mkdir(parents=True, exist_ok=True)
    (path / "compare.json").write_text(json.dumps(_clean(report), indent=2) + "\n")
    first = model_a.param_names[0]
    print(f"{'':28s}{'A':>16s}{'B':>16s}")
    rows = [
        ("sampler", report["a"]["sampler"], report["b"]["sampler"]),
        ("h", report["a"]["h"], report["b"]["h"]),
        ("transitions", report["a"]["transitions"], report["b"]["transitions"]),
        ("gradients", report["a"]["total_gradients"], report["b"]["total_gradients"]),
        ("ess(|theta|^2)/1000 grads", report["a"]["ess_sq_norm_per_1000_grads"], report["b"]["ess_sq_norm_per_1000_grads"]),
        (f"min({first})", report["a"]["min"][first], report["b"]["min"][first]),
        (f"max({first})", report["a"]["max"][first], report["b"]["max"][first]),
    ]
    for label, va, vb in rows:
        fa = f"{va:.5g}" if isinstance(va, float) else str(va)
        fb = f"{vb:.5g}" if isinstance(vb, float) else str(vb)
        print(f"{label:28s}{fa:>16s}{fb:>16s}")
    return 0


# ---------------------------------------------------------------- parser


def _add_run_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", help="flat key = value settings file")
    g = p.add_argument_group("target")
    g.add_argument("--target", choices=TARGETS, default=S)
    g.add_argument("--dim", type=int, default=S, help="dimension of the Gaussian targets")
    g.add_argument("--d", type=int, default=S, help="number of funnel x coordinates")
    g.add_argument("--scales", type=_to_scales, default=S, help="comma separated scales for the gaussian target")
    g.add_argument("--data", default=S, help="CSV with a 'y' column for stock_watson")
    g.add_argument("--series-length", type=int, default=S)
    g.add_argument("--series-sigma", type=float, default=S)
    g.add_argument("--series-seed", type=int, default=S)
    g.add_argument("--mass-matrix", default=S, help="CSV: one row (diagonal) or a square matrix")
    g = p.add_argument_group("sampler")
    g.add_argument("--sampler", choices=SAMPLERS, default=S)
    g.add_argument("--h", type=float, default=S, help="macro step size")
    g.add_argument("--delta", type=_to_float, default=S, help="energy error threshold")
    g.add_argument("--m-max", type=int, default=S, help="maximum doublings (fixed doublings for bphmc/exact_bp)")
    g.add_argument("--jitter", type=float, default=S)
    g.add_argument("--jitter-mode", choices=("per_transition", "per_macro_step"), default=S)
    g.add_argument("--energy-error-mode", choices=("envelope", "endpoint"), default=S)
    g.add_argument("--min-halvings", type=int, default=S)
    g.add_argument("--halvings-cap", type=int, default=S)
    g = p.add_argument_group("run")
    g.add_argument("--chains", type=int, default=S)
    g.add_argument("--iters", type=int, default=S)
    g.add_argument("--warmup", type=int, default=S)
    g.add_argument("--adapt", type=_to_bool, default=S, help="tune delta and h during warmup (WALNUTS only)")
    g.add_argument("--energy-budget", type=float, default=S)
    g.add_argument("--p-a", type=float, default=S)
    g.add_argument("--gamma", type=float, default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--thin", type=int, default=S)
    g.add_argument("--workers", type=int, default=S, help="process pool size for chains")
    g.add_argument("--out", default=S, help=f"output directory (default ${OUTPUT_ENV} or ./walnuts_out)")


def build_parser():
    parser = argparse.ArgumentParser(prog="walnuts", description="WALNUTS sampler experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("sample", parents=[common], help="warmup and sample"))
    _add_run_flags(sub.add_parser("tune", parents=[common], help="warmup only"))

    p = sub.add_parser("validate", parents=[common], help="run property suites")
    p.add_argument("suite", help=f"all or one of: {', '.join(oracles.SUITES)}")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", parents=[common], help="two configs at a matched gradient budget")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.add_argument("--budget", type=int, help="gradients per chain; default is what config A spends in its iters")
    p.add_argument("--match-nuts-step", action="store_true", help="set B's step from A's gradients per unit time")
    p.add_argument("--seed", type=int, help="override the seed of both configs")
    p.add_argument("--out")
    return parser


def _settings(args):
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    file_values = read_config_file(args.config) if args.config else {}
    return resolve_settings(file_values, flags)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sample":
            return cmd_sample(_settings(args))
        if args.command == "tune":
            return cmd_tune(_settings(args))
        if args.command == "validate":
            return cmd_validate(args.suite, {"n": args.n, "m": args.m, "seed": args.seed})
        if args.command == "compare":
            override = {"seed": args.seed} if args.seed is not None else {}
            sa = resolve_settings(read_config_file(args.config_a), override)
            sb = resolve_settings(read_config_file(args.config_b), override)
            return cmd_compare(sa, sb, args.budget, args.match_nuts_step, args.out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
