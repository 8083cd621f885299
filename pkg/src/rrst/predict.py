"""Plug-in conditional prediction at unobserved site-periods.

The conditional mean and variance use the fitted parameters and the same
block solves as the likelihood; only the (targets x training) cross
covariance is materialized, never the dense training covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisKind
from .covariance import exp_corr
from .fit import FittedModel, rebuild_bases
from .geometry import SiteTable, pairwise_distances
from .likelihood import BlockSolver, build_layout
from .temporal import ObservationSet

COINCIDENT_KM = 1e-9


@dataclass
class PredictionRequest:
    """Targets: explicit (site, period) pairs over a target site table.

    ``pairs`` holds (site index into ``sites``, period) tuples; when None,
    the full sites x periods grid is used.
    """

    sites: SiteTable
    periods: list[int] | None = None
    pairs: list[tuple[int, int]] | None = None
    want_variance: bool = True
    want_lta: bool = False
    lta_observed_only: bool = True

    def target_pairs(self) -> list[tuple[int, int]]:
        if self.pairs is not None:
            return list(self.pairs)
        if self.periods is None:
            raise ValueError("request needs either pairs or periods")
        return [(i, int(t)) for t in self.periods for i in range(self.sites.n)]


@dataclass
class PredictionResult:
    site_ids: list[str]
    periods: np.ndarray
    mean: np.ndarray  # log scale
    variance: np.ndarray | None
    lta: dict[str, float] = field(default_factory=dict)  # native scale per site
    cond_cov: np.ndarray | None = None


def long_term_average(values, observed_periods) -> float:
    """Mean of exponentiated log values over exactly the observed periods."""
    observed_periods = list(observed_periods)
    if len(observed_periods) == 0:
        raise ValueError("empty observed-period set")
    values = np.asarray(values, dtype=float)
    if len(values) != len(observed_periods):
        raise ValueError("values and observed_periods length mismatch")
    return float(np.exp(values).mean())


def _match_training_sites(targets: SiteTable, train: SiteTable) -> np.ndarray:
    """Index of the coinciding training site per target (-1 when new)."""
    out = np.full(targets.n, -1, dtype=int)
    train_pos = {sid: k for k, sid in enumerate(train.site_ids)}
    d = pairwise_distances(targets.coords, train.coords)
    for i, sid in enumerate(targets.site_ids):
        if sid in train_pos and d[i, train_pos[sid]] <= COINCIDENT_KM:
            out[i] = train_pos[sid]
        else:
            j = int(np.argmin(d[i]))
            if d[i, j] <= COINCIDENT_KM:
                out[i] = j
    return out


def predict(model: FittedModel, data: ObservationSet,
            req: PredictionRequest) -> PredictionResult:
    """Conditional mean/variance of the log process at requested site-periods."""
    spec, params = model.spec, model.params
    tbasis = model.tbasis
    pairs = req.target_pairs()
    for _, t in pairs:
        if t not in tbasis.periods:
            raise ValueError(f"target period {t} outside the temporal basis grid; "
                             "no temporal extrapolation")
    tsites = req.sites
    if model.spec.covariate_selection is None:
        needed = set(model.sites.covariate_names)
    else:
        needed = set(nm for sel in model.spec.covariate_selection for nm in sel)
    if not needed.issubset(set(tsites.covariate_names)):
        raise ValueError("target covariates do not match the fitted covariate set")

    bases = model.bases if model.bases is not None else rebuild_bases(model)
    layout = build_layout(model.sites, data, tbasis, spec.basis,
                          spec.covariate_selection,
                          spec.basis.fixed_range_km)
    if bases is not None:
        layout.bases = bases
        from .basis import assemble_Z_B_blocks
        layout.Z_B = assemble_Z_B_blocks(bases)
    y = data.values
    solver = BlockSolver(params, layout)
    r = y - layout.FX @ model.alpha_hat
    sir = solver.solve(r)

    m, n = layout.m, layout.n
    n_tgt = len(pairs)
    tgt_site_idx = np.array([p[0] for p in pairs])
    tgt_periods = np.array([p[1] for p in pairs])
    f_tgt = tbasis.rows(tgt_periods)  # (n_tgt, m)

    # fixed-effect mean F* X* alpha
    name_pos = {nm: k for k, nm in enumerate(tsites.covariate_names)}
    sel = (spec.covariate_selection if spec.covariate_selection is not None
           else [list(model.sites.covariate_names)] * m)
    unpen_tgt = np.zeros((tsites.n, 0))
    pen_tgt_fields = None
    if bases is not None:
        rows = [b.rows_at(tsites.coords) for b in bases]
        unpen_tgt = rows[0][0]
        pen_tgt_fields = [rw[1] for rw in rows]
    fxa = np.zeros(n_tgt)
    c0 = 0
    for j in range(m):
        cols = [np.ones(tsites.n)]
        for nm in sel[j]:
            cols.append(tsites.covariates[:, name_pos[nm]])
        for q in range(unpen_tgt.shape[1]):
            cols.append(unpen_tgt[:, q])
        Xj = np.column_stack(cols)
        a_j = model.alpha_hat[c0:c0 + Xj.shape[1]]
        c0 += Xj.shape[1]
        fxa += f_tgt[:, j] * (Xj @ a_j)[tgt_site_idx]
    if c0 != len(model.alpha_hat):
        raise ValueError("coefficient vector length mismatch against target design")

    # cross covariance (targets x training observations)
    match = _match_training_sites(tsites, model.sites)
    cross = np.zeros((n_tgt, layout.N))
    Z_B = layout.Z_B_for(params)
    if Z_B is not None and Z_B.shape[1] > 0:
        U = layout.F @ Z_B  # (N, m K')
        kp = Z_B.shape[1] // m
        ustar = np.zeros((n_tgt, m * kp))
        for j in range(m):
            ustar[:, j * kp:(j + 1) * kp] = (f_tgt[:, j:j + 1]
                                             * pen_tgt_fields[j][tgt_site_idx])
        c_diag = np.concatenate([np.full(kp, th.tau2) for th in params.theta_B])
        cross += (ustar * c_diag[None, :]) @ U.T
    if params.has_nugget:
        sig_p = np.asarray(params.theta_P)
        trained = match[tgt_site_idx] >= 0
        fw = f_tgt * sig_p[None, :]  # (n_tgt, m) weighted trend values
        for a in np.nonzero(trained)[0]:
            s_train = match[tgt_site_idx[a]]
            F_cols = [layout.F.getcol(i * n + s_train).toarray().ravel()
                      for i in range(m)]
            cross[a] += sum(fw[a, i] * F_cols[i] for i in range(m))
    # residual field: shared periods only
    th_v = params.theta_V
    d_cross = pairwise_distances(tsites.coords, model.sites.coords)
    for t, rows, sidx, _f in layout.period_blocks:
        in_t = np.nonzero(tgt_periods == t)[0]
        if len(in_t) == 0:
            continue
        block = th_v.tau2 * exp_corr(d_cross[np.ix_(tgt_site_idx[in_t], sidx)], th_v.phi)
        if th_v.sigma2 > 0:
            for bi, a in enumerate(in_t):
                mt = match[tgt_site_idx[a]]
                if mt >= 0:
                    hit = np.nonzero(sidx == mt)[0]
                    if len(hit):
                        block[bi, hit[0]] += th_v.sigma2
        cross[np.ix_(in_t, rows)] += block

    mean = fxa + cross @ sir
    variance = None
    cond_cov = None
    if req.want_variance:
        sc = solver.solve(cross.T)  # (N, n_tgt)
        explained = cross @ sc
        # full target-target covariance for the conditional covariance
        full = np.zeros((n_tgt, n_tgt))
        if Z_B is not None and Z_B.shape[1] > 0:
            full += (ustar * c_diag[None, :]) @ ustar.T
        if params.has_nugget:
            same_site = (tgt_site_idx[:, None] == tgt_site_idx[None, :])
            same_coord = pairwise_distances(
                tsites.coords[tgt_site_idx], tsites.coords[tgt_site_idx]) <= COINCIDENT_KM
            share = same_site | same_coord
            full += share * (f_tgt @ (sig_p[:, None] * f_tgt.T))
        same_period = tgt_periods[:, None] == tgt_periods[None, :]
        d_tt = pairwise_distances(tsites.coords[tgt_site_idx], tsites.coords[tgt_site_idx])
        vmat = th_v.tau2 * exp_corr(d_tt, th_v.phi)
        vmat += th_v.sigma2 * ((d_tt <= COINCIDENT_KM)
                               & (tgt_site_idx[:, None] == tgt_site_idx[None, :]))
        full += same_period * vmat
        cond_cov = full - explained
        variance = np.maximum(np.diag(cond_cov).copy(), 0.0)

    result = PredictionResult(
        [tsites.site_ids[i] for i in tgt_site_idx], tgt_periods, mean, variance,
        cond_cov=cond_cov)
    if req.want_lta:
        for i in np.unique(tgt_site_idx):
            sid = tsites.site_ids[i]
            mask = tgt_site_idx == i
            result.lta[sid] = float(np.exp(mean[mask]).mean())
    return result
