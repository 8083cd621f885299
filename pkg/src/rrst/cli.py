"""Command-line interface: fit, predict, cv, simulate, and bench commands.

Configuration is a flat dotted-key dictionary: defaults, overridden by a
JSON config file (nested objects are flattened), overridden by command
line flags. All outputs are deterministic given identical inputs and seed;
nothing timestamped is written to output files (logs go to stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from datetime import date
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import BasisKind, RangeMode, SpatialBasisSpec
from .covariance import ExpCovParams
from .evaluation import cross_validate, make_folds
from .fit import ModelSpec, OptimizerOptions, fit, load_model, save_model
from .geometry import (KnotSource, SiteKind, grid_candidates, pairwise_distances,
                       select_knots)
from .io import (read_observations, read_sites, write_basis, write_lta,
                 write_observations, write_predictions, write_sites, write_truth)
from .predict import PredictionRequest, predict
from .simulate import make_archetype_layout, simulate
from .temporal import PERIOD_DAYS, TemporalBasis

log = logging.getLogger("rrst")

DEFAULTS = {
    "seed": 0,
    "threads": 0,  # 0 = leave BLAS pools alone
    "paths.sites": None,
    "paths.obs": None,
    "paths.out": ".",
    "model.m": 2,
    "model.basis": "tprs",
    "model.rank": 10,
    "model.range_mode": "est",
    "model.beta_nugget": "on",
    "model.knots": "sites",
    "model.smooth_df": None,
    "model.covariates": None,
    "model.max_iter": 200,
    "model.multistart": 1,
    "fit.dump_basis": False,
    "predict.model": None,
    "predict.targets": None,
    "predict.periods": "all",
    "cv.class": "fixed",
    "cv.folds": 10,
    "cv.ranks": None,
    "cv.refit_trends": False,
    "cv.cluster_folds": False,
    "cv.log_scale": False,
    "sim.n_fixed": 10,
    "sim.n_snapshot": 0,
    "sim.n_home": 0,
    "sim.T": 26,
    "bench.sizes": [50, 100, 200, 400],
    "bench.reps": 3,
    "bench.rank": 25,
    "bench.T": 10,
}

CV_CLASS = {"fixed": SiteKind.AQS_FIXED, "snapshot": SiteKind.SNAPSHOT,
            "home": SiteKind.HOME}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            file_cfg = _flatten(json.load(fh))
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    flag_map = {
        "sites": "paths.sites", "obs": "paths.obs", "out": "paths.out",
        "basis": "model.basis", "rank": "model.rank",
        "range_mode": "model.range_mode", "beta_nugget": "model.beta_nugget",
        "knots": "model.knots", "cv_class": "cv.class", "seed": "seed",
        "threads": "threads", "model": "predict.model",
        "targets": "predict.targets",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "dump_basis", False):
        cfg["fit.dump_basis"] = True
    if getattr(args, "refit_trends", False):
        cfg["cv.refit_trends"] = True
    if getattr(args, "cluster_folds", False):
        cfg["cv.cluster_folds"] = True
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def parse_range_mode(text: str, max_dist: float):
    if text == "est":
        return RangeMode.ESTIMATED, None
    if not text.startswith("fixed:"):
        raise ValueError(f"bad range mode {text!r}; expected est or fixed:...")
    val = text[len("fixed:"):]
    if val == "max":
        return RangeMode.FIXED, max_dist
    if val.startswith("max/"):
        return RangeMode.FIXED, max_dist / float(val[4:])
    return RangeMode.FIXED, float(val)


def build_model_spec(cfg: dict, sites, rank: int | None = None) -> ModelSpec:
    kind_name = cfg["model.basis"]
    K = int(cfg["model.rank"] if rank is None else rank)
    if K == 0:
        kind_name = "none"
    try:
        kind = BasisKind(kind_name)
    except ValueError:
        raise ValueError(f"unknown basis kind {kind_name!r}") from None
    max_dist = float(pairwise_distances(sites.coords, sites.coords).max())
    range_mode, fixed_km = parse_range_mode(cfg["model.range_mode"], max_dist)
    knots = None
    if kind is BasisKind.LRK:
        if cfg["model.knots"] == "grid":
            cell = max_dist / max(2.0, math.ceil(math.sqrt(3.0 * K)))
            cands = grid_candidates(sites, cell)
            if len(cands) < K:
                cands = sites.coords
            knots = select_knots(cands, K, source=KnotSource.GRID)
        else:
            knots = select_knots(sites.coords, K)
    if kind is BasisKind.NONE:
        bspec = SpatialBasisSpec(BasisKind.NONE)
    else:
        bspec = SpatialBasisSpec(kind, K, knots, range_mode, fixed_km)
    sel = None
    if cfg["model.covariates"] is not None:
        sel = [list(cfg["model.covariates"])] * int(cfg["model.m"])
    return ModelSpec(
        m=int(cfg["model.m"]), basis=bspec,
        include_beta_nugget=cfg["model.beta_nugget"] == "on",
        covariate_selection=sel,
        smooth_df=cfg["model.smooth_df"],
        optimizer=OptimizerOptions(max_iter=int(cfg["model.max_iter"]),
                                   multistart=int(cfg["model.multistart"]),
                                   seed=int(cfg["seed"])))


class OutputTracker:
    """Collects files written by a command so failures leave no partial output."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.files.append(p)
        return p

    def cleanup(self):
        for p in self.files:
            try:
                p.unlink()
            except OSError:
                pass


def _read_inputs(cfg):
    if not cfg["paths.sites"] or not cfg["paths.obs"]:
        raise ValueError("both --sites and --obs are required")
    for key in ("paths.sites", "paths.obs"):
        if not Path(cfg[key]).exists():
            raise FileNotFoundError(f"input file not found: {cfg[key]}")
    sites = read_sites(cfg["paths.sites"])
    obs = read_observations(cfg["paths.obs"])
    unknown = set(obs.site_ids) - set(sites.site_ids)
    if unknown:
        raise ValueError(f"observations reference unknown sites {sorted(unknown)}")
    return sites, obs


def _param_table(model) -> list[tuple[str, float]]:
    d = model.diagnostics
    return [(nm.removeprefix("log_"), float(np.exp(x)))
            for nm, x in zip(d["param_names"], d["opt_x"])]


def cmd_fit(cfg: dict, out: OutputTracker) -> int:
    sites, obs = _read_inputs(cfg)
    spec = build_model_spec(cfg, sites)
    mean, sd = float(np.mean(obs.values)), float(np.std(obs.values))
    log.info("ingested %d sites, %d observations", sites.n, obs.N)
    model = fit(spec, sites, obs)
    save_model(model, out.path("model.json"))
    lines = [
        "fit report",
        f"sites: {sites.n}",
        f"observations: {obs.N}",
        f"log-value mean: {mean:.2f}",
        f"log-value sd: {sd:.2f}",
        f"trend functions: {spec.m}",
        f"basis: {spec.basis.kind.value} K={spec.basis.K}",
        f"log-likelihood: {model.loglik:.6f}",
        f"aic: {model.aic:.6f}",
        "parameters:",
    ]
    lines += [f"  {nm} = {v:.6g}" for nm, v in _param_table(model)]
    out.path("fit_report.txt").write_text("\n".join(lines) + "\n")
    if cfg["fit.dump_basis"] and model.bases is not None:
        write_basis(sites, model.bases, out.path("basis.csv"))
    print(f"fit ok: loglik={model.loglik:.4f} aic={model.aic:.4f}")
    return 0


def _parse_periods(text: str, model) -> list[int] | None:
    if text == "all":
        return None
    anchor = model.tbasis.anchor
    periods = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            periods.append(int(tok))
        except ValueError:
            if anchor is None:
                raise ValueError(f"period {tok!r}: no anchor date in model; "
                                 "use integer periods") from None
            d = date.fromisoformat(tok)
            periods.append((d - anchor).days // PERIOD_DAYS)
    return periods


def cmd_predict(cfg: dict, out: OutputTracker) -> int:
    if not cfg["predict.model"]:
        raise ValueError("--model is required for predict")
    model = load_model(cfg["predict.model"])
    _, obs = _read_inputs(cfg)
    tpath = cfg["predict.targets"] or cfg["paths.sites"]
    tsites = read_sites(tpath)
    periods = _parse_periods(str(cfg["predict.periods"]), model)
    if periods is None:
        periods = [int(t) for t in model.tbasis.periods]
    req = PredictionRequest(tsites, periods=periods, want_lta=True)
    res = predict(model, obs, req)
    anchor = model.tbasis.anchor or obs.anchor
    write_predictions(res, anchor, out.path("predictions.csv"))
    write_lta(res.lta, out.path("lta.csv"))
    print(f"predict ok: {len(res.mean)} site-periods, {len(res.lta)} sites")
    return 0


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def cmd_cv(cfg: dict, out: OutputTracker) -> int:
    sites, obs = _read_inputs(cfg)
    kind = CV_CLASS.get(cfg["cv.class"])
    if kind is None:
        raise ValueError(f"unknown cv class {cfg['cv.class']!r}")
    ranks = cfg["cv.ranks"]
    if ranks is None:
        ranks = [int(cfg["model.rank"])]
    ranks = sorted({int(k) for k in ranks}, reverse=True)
    plan = make_folds(sites, kind, k=int(cfg["cv.folds"]), seed=int(cfg["seed"]),
                      cluster=bool(cfg["cv.cluster_folds"]))
    native = not bool(cfg["cv.log_scale"])
    reports = {}
    for K in ranks:
        log.info("cross-validating K=%d", K)
        spec = build_model_spec(cfg, sites, rank=K)
        rep = cross_validate(spec, sites, obs, plan,
                             refit_trends=bool(cfg["cv.refit_trends"]),
                             native=native)
        reports[K] = rep

    row_label = (f"{cfg['model.basis']}/{cfg['model.range_mode']}"
                 if any(k > 0 for k in ranks) else "none")
    table_lines = ["basis_range," + ",".join(str(k) for k in ranks)]
    cells = []
    for K in ranks:
        r2 = reports[K].metrics.get("r2_lta")
        cells.append(f"{100 * r2:.1f}" if r2 is not None else "NA")
    table_lines.append(row_label + "," + ",".join(cells))
    out.path("cv_table.csv").write_text("\n".join(table_lines) + "\n")

    payload = {
        "class": cfg["cv.class"],
        "seed": int(cfg["seed"]),
        "folds": int(cfg["cv.folds"]),
        "native_scale": native,
        "results": {str(K): {
            "metrics": _jsonable(rep.metrics),
            "per_season": _jsonable(rep.per_season),
            "fold_info": _jsonable(rep.fold_info),
            "any_failed": rep.any_failed,
            "lta_observed": _jsonable(rep.lta_observed),
            "lta_predicted": _jsonable(rep.lta_predicted),
        } for K, rep in reports.items()},
    }
    with open(out.path("cv_report.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    flagged = [str(K) for K, rep in reports.items() if rep.any_failed]
    if flagged:
        print(f"WARNING: folds failed for K in {{{','.join(flagged)}}}; "
              "metrics cover successful folds only")
    print("\n".join(table_lines))
    return 0


def harmonic_trend_basis(T: int, m: int, anchor: date | None = None) -> TemporalBasis:
    """Deterministic truth trends: constant plus orthonormalized harmonics."""
    grid = np.arange(T)
    cols = [np.ones(T)]
    yr = 365.25 / PERIOD_DAYS
    for j in range(1, m):
        h = (j + 1) // 2
        wave = np.sin if j % 2 else np.cos
        cols.append(wave(2 * np.pi * h * grid / yr))
    vals = np.column_stack(cols)
    if m > 1:
        rest = vals[:, 1:] - vals[:, 1:].mean(axis=0, keepdims=True)
        q, r = np.linalg.qr(rest)
        q *= np.sign(np.diag(r))[None, :]
        vals = np.column_stack([np.ones(T), q])
    return TemporalBasis(grid, vals, anchor or date(2000, 1, 3))


def cmd_simulate(cfg: dict, out: OutputTracker) -> int:
    n_unpen = 2 if cfg["model.basis"] == "tprs" and int(cfg["model.rank"]) else 0
    layout = make_archetype_layout(int(cfg["sim.n_fixed"]),
                                   int(cfg["sim.n_snapshot"]),
                                   int(cfg["sim.n_home"]),
                                   int(cfg["sim.T"]), seed=int(cfg["seed"]),
                                   n_unpen=n_unpen, m=int(cfg["model.m"]))
    tb = harmonic_trend_basis(int(cfg["sim.T"]), int(cfg["model.m"]))
    spec = build_model_spec(cfg, layout.sites)
    obs = simulate(layout, spec.basis, tb,
                   covariate_selection=spec.covariate_selection)
    write_sites(layout.sites, out.path("sites.csv"))
    write_observations(obs, out.path("obs.csv"))
    write_truth(layout, out.path("truth.json"))
    print(f"simulate ok: {layout.sites.n} sites, {obs.N} observations")
    return 0


def cmd_bench(cfg: dict, out: OutputTracker) -> int:
    from .likelihood import build_layout, profile_loglik

    sizes = [int(n) for n in cfg["bench.sizes"]]
    reps = int(cfg["bench.reps"])
    K_low = int(cfg["bench.rank"])
    T = int(cfg["bench.T"])
    seed = int(cfg["seed"])
    rows = []
    with threadpool_limits(limits=1):
        for n in sizes:
            layout_sim = make_archetype_layout(n, 0, 0, T, seed=seed)
            sites = layout_sim.sites
            tb = harmonic_trend_basis(T, 2)
            obs = simulate(layout_sim, SpatialBasisSpec(BasisKind.NONE), tb)
            max_dist = float(pairwise_distances(sites.coords, sites.coords).max())
            phi_fix = max_dist / 4.0
            for label, K in (("full", n), ("lowrank", K_low)):
                if K > n:
                    continue
                if label == "full":
                    # the full-rank model carries the complete per-trend site
                    # covariance in one factorization rather than a basis
                    mlay = build_layout(sites, obs, tb, None)
                else:
                    knots = select_knots(sites.coords, K)
                    bspec = SpatialBasisSpec(BasisKind.LRK, K, knots,
                                             RangeMode.FIXED, phi_fix)
                    mlay = build_layout(sites, obs, tb, bspec, None, phi_fix)
                for nugget in (True, False):
                    params = _bench_params(phi_fix, nugget)
                    try:
                        times = []
                        for _ in range(reps):
                            t0 = time.perf_counter()
                            profile_loglik(params, mlay, obs.values,
                                           full_rank=label == "full")
                            times.append(time.perf_counter() - t0)
                        med = float(np.median(times))
                        rows.append((n, label, K, nugget, med, ""))
                    except MemoryError:
                        rows.append((n, label, K, nugget, float("nan"),
                                     "memory"))
                    log.info("bench n=%d %s K=%d nugget=%s", n, label, K, nugget)

    lines = ["n,cell,K,nugget,median_seconds,error"]
    for n, label, K, nug, med, err in rows:
        lines.append(f"{n},{label},{K},{'on' if nug else 'off'},{med:.6g},{err}")
    slopes = {}
    for label in ("full", "lowrank"):
        for nug in (True, False):
            pts = [(n, med) for n, lb, _, ng, med, err in rows
                   if lb == label and ng == nug and not err and np.isfinite(med)]
            if len(pts) >= 2:
                lx = np.log([p[0] for p in pts])
                ly = np.log([max(p[1], 1e-9) for p in pts])
                slopes[f"{label}_nugget_{'on' if nug else 'off'}"] = float(
                    np.polyfit(lx, ly, 1)[0])
    lines.append("")
    lines.append("slopes (log-log growth exponents):")
    for k in sorted(slopes):
        lines.append(f"{k},{slopes[k]:.3f}")
    out.path("bench.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _bench_params(phi: float, nugget: bool):
    from .covariance import CovParams
    theta_B = [ExpCovParams(phi, 0.5), ExpCovParams(phi, 0.3)]
    theta_P = [0.1, 0.05] if nugget else None
    return CovParams(theta_B, ExpCovParams(phi, 0.3, 0.1), theta_P)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rrst",
        description="Reduced-rank spatio-temporal air pollution modeling")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fit", "predict", "cv", "simulate", "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--sites", help="site table CSV")
        sp.add_argument("--obs", help="observation CSV")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--basis", choices=["none", "lrk", "tprs"])
        sp.add_argument("--rank", type=int, help="basis rank K")
        sp.add_argument("--range-mode", dest="range_mode",
                        help="est | fixed:VALUE_KM | fixed:max | fixed:max/2 "
                             "| fixed:max/4 | fixed:max/8")
        sp.add_argument("--beta-nugget", dest="beta_nugget", choices=["on", "off"])
        sp.add_argument("--knots", choices=["sites", "grid"])
        sp.add_argument("--cv-class", dest="cv_class",
                        choices=["fixed", "snapshot", "home"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--dump-basis", dest="dump_basis", action="store_true")
        sp.add_argument("--refit-trends", dest="refit_trends", action="store_true")
        sp.add_argument("--cluster-folds", dest="cluster_folds", action="store_true")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key by dotted name")
        if name == "predict":
            sp.add_argument("--model", help="fitted model JSON")
            sp.add_argument("--targets", help="target site table CSV")
    return p


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "cv": cmd_cv,
            "simulate": cmd_simulate, "bench": cmd_bench}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = OutputTracker(Path(cfg["paths.out"]))
    threads = int(cfg["threads"]) or None
    try:
        if threads:
            with threadpool_limits(limits=threads):
                return COMMANDS[args.command](cfg, out)
        return COMMANDS[args.command](cfg, out)
    except Exception as exc:  # contract: nonzero exit, no partial outputs
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
