"""Synthetic data generation from the exact model, for oracle tests and benchmarks.

Sampling uses numpy's PCG64 generator; the generator name and seed are
recorded in the layout so draws are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import SpatialBasis, SpatialBasisSpec, BasisKind, build_basis
from .covariance import CovParams, cov_matrix
from .geometry import SiteKind, SiteTable, pairwise_distances
from .temporal import ObservationSet, TemporalBasis

GENERATOR = "numpy.random.PCG64"


@dataclass
class SimLayout:
    """Sites, per-site sampling schedule, and generative truth."""

    sites: SiteTable
    schedule: dict[str, list[int]]  # site_id -> observed periods
    params: CovParams
    alpha: np.ndarray
    seed: int = 0
    generator: str = GENERATOR

    def __post_init__(self):
        if not self.schedule or all(len(v) == 0 for v in self.schedule.values()):
            raise ValueError("sampling schedule is empty")
        unknown = set(self.schedule) - set(self.sites.site_ids)
        if unknown:
            raise ValueError(f"schedule references unknown sites {sorted(unknown)}")


def alpha_length(basis_spec: SpatialBasisSpec, m: int, n_cov: int) -> int:
    """Fixed-effect count: per trend, intercept + covariates + any
    unpenalized basis columns (two standardized coordinates for TPRS)."""
    q = 2 if basis_spec.kind is BasisKind.TPRS else 0
    return m * (1 + n_cov + q)


def make_archetype_layout(n_fixed: int, n_snapshot: int, n_home: int, T: int,
                          seed: int = 0, params: CovParams | None = None,
                          alpha: np.ndarray | None = None,
                          n_cov: int = 2, extent_km: float = 50.0,
                          n_unpen: int = 0, m: int = 2) -> SimLayout:
    """Unbalanced monitoring archetype: fixed sites observed at every period,
    snapshot sites at 3 shared periods, home sites at 2 random periods each."""
    if T < 4:
        raise ValueError("T must be >= 4")
    if n_fixed + n_snapshot + n_home == 0:
        raise ValueError("at least one site is required")
    rng = np.random.default_rng(seed)
    ids, kinds = [], []
    for k in range(n_fixed):
        ids.append(f"fix{k:03d}")
        kinds.append(SiteKind.AQS_FIXED)
    for k in range(n_snapshot):
        ids.append(f"snp{k:03d}")
        kinds.append(SiteKind.SNAPSHOT)
    for k in range(n_home):
        ids.append(f"hom{k:03d}")
        kinds.append(SiteKind.HOME)
    n = len(ids)
    coords = rng.uniform(0, extent_km, size=(n, 2))
    covs = rng.normal(size=(n, n_cov))
    sites = SiteTable(ids, coords, kinds, covs,
                      [f"c{k}" for k in range(n_cov)])

    snap_periods = sorted(rng.choice(T, size=3, replace=False).tolist())
    schedule = {}
    for sid, kind in zip(ids, kinds):
        if kind is SiteKind.AQS_FIXED:
            schedule[sid] = list(range(T))
        elif kind is SiteKind.SNAPSHOT:
            schedule[sid] = list(snap_periods)
        else:
            schedule[sid] = sorted(rng.choice(T, size=2, replace=False).tolist())

    if params is None:
        from .covariance import ExpCovParams
        tau2s = [0.5] + [0.3 / (1 + j) for j in range(m - 1)]
        params = CovParams(
            [ExpCovParams(extent_km / 4, t2) for t2 in tau2s],
            ExpCovParams(extent_km / 5, 0.3, 0.1),
            [0.1 / (1 + j) for j in range(m)])
    if alpha is None:
        alpha = rng.normal(scale=0.5, size=params.m * (1 + n_cov + n_unpen))
        alpha[0] = 3.5  # overall log-concentration level
    return SimLayout(sites, schedule, params, np.asarray(alpha, dtype=float), seed)


def simulate(layout: SimLayout, basis_spec: SpatialBasisSpec,
             trend_basis: TemporalBasis,
             covariate_selection: list[list[str]] | None = None) -> ObservationSet:
    """Draw one dataset: Y = F X alpha + F Z_B Btilde + F P + V."""
    sites = layout.sites
    params = layout.params
    m = trend_basis.m
    if params.m != m:
        raise ValueError("trend count mismatch between params and basis")
    rng = np.random.default_rng(layout.seed)
    n = sites.n

    bases: list[SpatialBasis] | None = None
    if basis_spec.kind is not BasisKind.NONE:
        if basis_spec.kind is BasisKind.LRK:
            bases = [build_basis(basis_spec, sites.coords, th.phi)
                     for th in params.theta_B]
        else:
            bases = [build_basis(basis_spec, sites.coords)] * m

    # spatial coefficient surfaces per trend: basis draw (+ per-site nugget)
    coef = np.zeros((m, n))
    for j in range(m):
        if bases is not None:
            kp = bases[j].penalized.shape[1]
            delta = rng.normal(scale=np.sqrt(params.theta_B[j].tau2), size=kp)
            coef[j] += bases[j].penalized @ delta
        if params.has_nugget:
            coef[j] += rng.normal(scale=np.sqrt(params.theta_P[j]), size=n)

    # fixed-effect part of the coefficient surfaces
    if covariate_selection is None:
        covariate_selection = [list(sites.covariate_names)] * m
    name_pos = {nm: k for k, nm in enumerate(sites.covariate_names)}
    c0 = 0
    for j in range(m):
        cols = [np.ones(n)]
        for nm in covariate_selection[j]:
            cols.append(sites.covariates[:, name_pos[nm]])
        if bases is not None and bases[j].unpenalized.shape[1]:
            cols.append(bases[j].unpenalized)
        Xj = np.column_stack(cols)
        coef[j] += Xj @ layout.alpha[c0:c0 + Xj.shape[1]]
        c0 += Xj.shape[1]
    if c0 != len(layout.alpha):
        raise ValueError(f"alpha has length {len(layout.alpha)}, design needs {c0}")

    # per-period residual draws and assembly (period-major, site-minor order)
    dists = pairwise_distances(sites.coords, sites.coords)
    snu = cov_matrix(dists, params.theta_V)
    by_period: dict[int, list[int]] = {}
    for sid, pers in layout.schedule.items():
        si = sites.index_of(sid)
        for t in pers:
            by_period.setdefault(int(t), []).append(si)
    recs_ids, recs_t, recs_v = [], [], []
    for t in sorted(by_period):
        sidx = sorted(by_period[t])
        block = snu[np.ix_(sidx, sidx)]
        L = np.linalg.cholesky(block + 1e-12 * np.eye(len(sidx)) * max(block.max(), 1.0)
                               if params.theta_V.sigma2 == 0 else block)
        v = L @ rng.normal(size=len(sidx))
        f = trend_basis.row(t)
        for k, si in enumerate(sidx):
            recs_ids.append(sites.site_ids[si])
            recs_t.append(t)
            recs_v.append(float(f @ coef[:, si] + v[k]))
    return ObservationSet(recs_ids, np.array(recs_t), np.array(recs_v),
                          trend_basis.anchor)
