"""Profile-likelihood parameter estimation and the persistable fitted model.

Covariance parameters are optimized on the log scale with box constraints
by L-BFGS-B, with gradients from central finite differences. LRK bases in
ESTIMATED range mode are rebuilt inside every objective evaluation, since
the range parameters enter the basis itself.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from datetime import date

import numpy as np
from scipy.optimize import minimize

from .basis import BasisKind, RangeMode, SpatialBasis, SpatialBasisSpec
from .covariance import CovParams, ExpCovParams
from .geometry import KnotSet, KnotSource, SiteKind, SiteTable
from .likelihood import (BlockSolver, ModelLayout, build_layout,
                         finite_diff_gradient, profile_loglik)
from .temporal import ObservationSet, TemporalBasis, estimate_temporal_basis

SCHEMA_VERSION = 1


@dataclass
class OptimizerOptions:
    max_iter: int = 200
    ftol: float = 1e-8
    gtol: float = 1e-5
    multistart: int = 1
    seed: int = 0


@dataclass
class ModelSpec:
    m: int = 2
    basis: SpatialBasisSpec = field(default_factory=lambda: SpatialBasisSpec(BasisKind.NONE))
    include_beta_nugget: bool = True
    covariate_selection: list[list[str]] | None = None
    smooth_df: float | None = None
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")


class ParamPacker:
    """Maps CovParams to/from the optimizer's log-scale vector with box bounds."""

    def __init__(self, spec: ModelSpec, max_dist: float, var_y: float):
        self.spec = spec
        self.m = spec.m
        self.has_basis = spec.basis.kind is not BasisKind.NONE
        self.estimate_phi = (spec.basis.kind is BasisKind.LRK
                             and spec.basis.range_mode is RangeMode.ESTIMATED)
        self.log_phi_lo = np.log(1e-3 * max_dist)
        self.log_phi_hi = np.log(10.0 * max_dist)
        self.log_var_lo = np.log(1e-8)
        self.log_var_hi = np.log(100.0 * max(var_y, 1e-8))
        names = []
        if self.estimate_phi:
            names += [f"log_phi_b{j + 1}" for j in range(self.m)]
        if self.has_basis:
            names += [f"log_tau2_b{j + 1}" for j in range(self.m)]
        if spec.include_beta_nugget:
            names += [f"log_sigma2_p{j + 1}" for j in range(self.m)]
        names += ["log_phi_v", "log_tau2_v", "log_sigma2_v"]
        self.names = names

    @property
    def size(self) -> int:
        return len(self.names)

    def bounds(self):
        lo, hi = [], []
        for nm in self.names:
            if nm.startswith("log_phi"):
                lo.append(self.log_phi_lo)
                hi.append(self.log_phi_hi)
            else:
                lo.append(self.log_var_lo)
                hi.append(self.log_var_hi)
        return np.array(lo), np.array(hi)

    def pack(self, params: CovParams) -> np.ndarray:
        x = []
        if self.estimate_phi:
            x += [np.log(th.phi) for th in params.theta_B]
        if self.has_basis:
            x += [np.log(th.tau2) for th in params.theta_B]
        if self.spec.include_beta_nugget:
            x += [np.log(s) for s in params.theta_P]
        x += [np.log(params.theta_V.phi), np.log(params.theta_V.tau2),
              np.log(params.theta_V.sigma2)]
        return np.array(x)

    def unpack(self, x: np.ndarray, default_phi: float) -> CovParams:
        x = np.asarray(x, dtype=float)
        k = 0
        if self.estimate_phi:
            phis = np.exp(x[k:k + self.m])
            k += self.m
        else:
            phis = np.full(self.m, default_phi)
        if self.has_basis:
            tau2s = np.exp(x[k:k + self.m])
            k += self.m
        else:
            tau2s = np.full(self.m, 1.0)  # inert: no basis columns
        theta_P = None
        if self.spec.include_beta_nugget:
            theta_P = list(np.exp(x[k:k + self.m]))
            k += self.m
        theta_V = ExpCovParams(float(np.exp(x[k])), float(np.exp(x[k + 1])),
                               float(np.exp(x[k + 2])))
        theta_B = [ExpCovParams(float(p), float(t)) for p, t in zip(phis, tau2s)]
        return CovParams(theta_B, theta_V, theta_P)


@dataclass
class FittedModel:
    spec: ModelSpec
    sites: SiteTable
    tbasis: TemporalBasis
    params: CovParams
    alpha_hat: np.ndarray
    loglik: float
    init_loglik: float
    column_labels: list[str]
    trace: list[float]
    fingerprint: str
    aic: float
    diagnostics: dict = field(default_factory=dict)
    bases: list[SpatialBasis] | None = None

    def n_params(self) -> int:
        return len(self.alpha_hat) + self.diagnostics.get("n_cov_params", 0)


def data_fingerprint(sites: SiteTable, obs: ObservationSet) -> str:
    h = hashlib.sha256()
    for sid, xy, kind, cov in zip(sites.site_ids, sites.coords, sites.kinds,
                                  sites.covariates):
        h.update(f"{sid}|{xy[0]:.12g}|{xy[1]:.12g}|{kind.value}|".encode())
        h.update(np.asarray(cov).tobytes())
    for s, t, v in zip(obs.site_ids, obs.periods, obs.values):
        h.update(f"{s}|{t}|{v:.12g};".encode())
    return h.hexdigest()


def initialize_params(spec: ModelSpec, layout: ModelLayout, y: np.ndarray) -> CovParams:
    """Deterministic start: phi at 1/4 max distance, residual variance split
    equally among the active variance components."""
    max_dist = float(layout.dists.max())
    phi0 = max_dist / 4.0
    coef, *_ = np.linalg.lstsq(layout.FX, y, rcond=None)
    resid = y - layout.FX @ coef
    var0 = float(np.var(resid))
    if var0 <= 0:
        raise ValueError("degenerate data: zero residual variance after OLS")
    n_active = 2  # nu sill + nu nugget
    if spec.basis.kind is not BasisKind.NONE:
        n_active += spec.m
    if spec.include_beta_nugget:
        n_active += spec.m
    v = var0 / n_active
    theta_B = [ExpCovParams(phi0, v if spec.basis.kind is not BasisKind.NONE else 1.0)
               for _ in range(spec.m)]
    theta_P = [v] * spec.m if spec.include_beta_nugget else None
    return CovParams(theta_B, ExpCovParams(phi0, v, v), theta_P)


class FitError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


def fit(spec: ModelSpec, sites: SiteTable, obs: ObservationSet,
        tbasis: TemporalBasis | None = None) -> FittedModel:
    """Estimate covariance parameters and GLS coefficients by profile ML."""
    if obs.N == 0:
        raise ValueError("empty observation set")
    if tbasis is None:
        tbasis = estimate_temporal_basis(obs, spec.m, spec.smooth_df)
    if tbasis.m != spec.m:
        raise ValueError("temporal basis trend count does not match spec")
    if (not spec.include_beta_nugget and spec.basis.kind is not BasisKind.NONE
            and 0 < spec.basis.K < 10):
        warnings.warn("very low-rank smooths without a coefficient-field nugget "
                      "are numerically unstable", stacklevel=2)

    fixed_phi = None
    if spec.basis.kind is BasisKind.LRK and spec.basis.range_mode is RangeMode.FIXED:
        fixed_phi = spec.basis.fixed_range_km
    layout = build_layout(sites, obs, tbasis, spec.basis,
                          spec.covariate_selection, fixed_phi)
    y = obs.values
    max_dist = float(layout.dists.max())
    packer = ParamPacker(spec, max_dist, float(np.var(y)))
    lo, hi = packer.bounds()
    init = initialize_params(spec, layout, y)
    default_phi = fixed_phi if fixed_phi is not None else max_dist / 4.0
    x0 = np.clip(packer.pack(init), lo, hi)

    def objective(x):
        params = packer.unpack(x, default_phi)
        return -profile_loglik(params, layout, y).value

    def gradient(x):
        g, _ = finite_diff_gradient(objective, x, lo, hi)
        return g

    f0 = objective(x0)
    opt = spec.optimizer
    best = None
    rng = np.random.default_rng(opt.seed)
    for start in range(max(1, opt.multistart)):
        xs = x0 if start == 0 else np.clip(
            x0 + rng.normal(scale=0.3, size=len(x0)), lo, hi)
        trace = []
        res = minimize(objective, xs, jac=gradient, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)),
                       callback=lambda xk: trace.append(float(objective(xk))),
                       options={"maxiter": opt.max_iter, "ftol": opt.ftol,
                                "gtol": opt.gtol})
        if not res.success:
            raise FitError(f"optimizer failure: {res.message}", trace)
        if best is None or res.fun < best[0].fun - 1e-12:
            best = (res, trace)
    res, trace = best
    if res.fun > f0 + 1e-8:
        raise FitError("optimizer ended below the initial likelihood", trace)

    params_hat = packer.unpack(res.x, default_phi)
    final = profile_loglik(params_hat, layout, y)
    bases = layout.bases_for(params_hat)
    n_cov = packer.size
    aic = 2.0 * (n_cov + len(final.alpha_hat)) - 2.0 * final.value
    diagnostics = {
        "n_iter": int(res.nit), "n_eval": int(res.nfev),
        "message": str(res.message), "n_cov_params": n_cov,
        "param_names": packer.names,
        "opt_x": [float(v) for v in res.x],
        "at_lower": [bool(b) for b in np.isclose(res.x, lo)],
        "at_upper": [bool(b) for b in np.isclose(res.x, hi)],
        "path": final.path,
    }
    return FittedModel(spec, sites, tbasis, params_hat, final.alpha_hat,
                       float(final.value), float(-f0), layout.column_labels,
                       trace, data_fingerprint(sites, obs), float(aic),
                       diagnostics, bases)


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: ModelSpec) -> dict:
    b = spec.basis
    return {
        "m": spec.m,
        "basis": {
            "kind": b.kind.value, "K": b.K,
            "knots": b.knots.knots.tolist() if b.knots is not None else None,
            "knot_source": b.knots.source.value if b.knots is not None else None,
            "range_mode": b.range_mode.value,
            "fixed_range_km": b.fixed_range_km,
        },
        "include_beta_nugget": spec.include_beta_nugget,
        "covariate_selection": spec.covariate_selection,
        "smooth_df": spec.smooth_df,
        "optimizer": vars(spec.optimizer),
    }


def _spec_from_dict(d: dict) -> ModelSpec:
    bd = d["basis"]
    knots = None
    if bd["knots"] is not None:
        knots = KnotSet(np.asarray(bd["knots"]), KnotSource(bd["knot_source"]))
    basis = SpatialBasisSpec(BasisKind(bd["kind"]), bd["K"], knots,
                             RangeMode(bd["range_mode"]), bd["fixed_range_km"])
    return ModelSpec(d["m"], basis, d["include_beta_nugget"],
                     d["covariate_selection"], d["smooth_df"],
                     OptimizerOptions(**d["optimizer"]))


def model_to_dict(model: FittedModel) -> dict:
    s = model.sites
    p = model.params
    return {
        "schema_version": SCHEMA_VERSION,
        "spec": _spec_to_dict(model.spec),
        "sites": {
            "site_ids": s.site_ids,
            "coords": s.coords.tolist(),
            "kinds": [k.value for k in s.kinds],
            "covariates": s.covariates.tolist(),
            "covariate_names": s.covariate_names,
        },
        "temporal_basis": {
            "periods": model.tbasis.periods.tolist(),
            "values": model.tbasis.values.tolist(),
            "anchor": model.tbasis.anchor.isoformat() if model.tbasis.anchor else None,
        },
        "params": {
            "theta_B": [{"phi": t.phi, "tau2": t.tau2} for t in p.theta_B],
            "theta_P": p.theta_P,
            "theta_V": {"phi": p.theta_V.phi, "tau2": p.theta_V.tau2,
                        "sigma2": p.theta_V.sigma2},
        },
        "alpha_hat": model.alpha_hat.tolist(),
        "column_labels": model.column_labels,
        "loglik": model.loglik,
        "init_loglik": model.init_loglik,
        "aic": model.aic,
        "trace": model.trace,
        "fingerprint": model.fingerprint,
        "diagnostics": model.diagnostics,
    }


def model_from_dict(d: dict) -> FittedModel:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported fitted-model schema {d.get('schema_version')}")
    spec = _spec_from_dict(d["spec"])
    sd = d["sites"]
    sites = SiteTable(sd["site_ids"], np.asarray(sd["coords"]),
                      [SiteKind(k) for k in sd["kinds"]],
                      np.asarray(sd["covariates"]), sd["covariate_names"])
    td = d["temporal_basis"]
    anchor = date.fromisoformat(td["anchor"]) if td["anchor"] else None
    tbasis = TemporalBasis(np.asarray(td["periods"]), np.asarray(td["values"]), anchor)
    pd_ = d["params"]
    params = CovParams(
        [ExpCovParams(t["phi"], t["tau2"]) for t in pd_["theta_B"]],
        ExpCovParams(**pd_["theta_V"]),
        pd_["theta_P"])
    model = FittedModel(spec, sites, tbasis, params,
                        np.asarray(d["alpha_hat"]), d["loglik"], d["init_loglik"],
                        d["column_labels"], d["trace"], d["fingerprint"],
                        d["aic"], d["diagnostics"])
    model.bases = rebuild_bases(model)
    return model


def rebuild_bases(model: FittedModel) -> list[SpatialBasis] | None:
    from .basis import build_basis
    spec = model.spec
    if spec.basis.kind is BasisKind.NONE:
        return None
    if spec.basis.kind is BasisKind.LRK:
        if spec.basis.range_mode is RangeMode.ESTIMATED:
            return [build_basis(spec.basis, model.sites.coords, th.phi)
                    for th in model.params.theta_B]
        return [build_basis(spec.basis, model.sites.coords,
                            spec.basis.fixed_range_km)] * spec.m
    return [build_basis(spec.basis, model.sites.coords)] * spec.m


def save_model(model: FittedModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)


def load_model(path) -> FittedModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
