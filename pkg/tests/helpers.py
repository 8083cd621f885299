"""Shared test fixtures: random instances and dense oracles.

The dense oracle builds the full N x N marginal covariance explicitly and
evaluates everything by dense Cholesky; it is deliberately independent of
the block-identity code paths it checks.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from rrst.basis import (BasisKind, RangeMode, SpatialBasisSpec, assemble_Z_B,
                        build_basis, lrk_basis, none_basis, tprs_basis)
from rrst.covariance import CovParams, ExpCovParams
from rrst.geometry import KnotSet, SiteKind, SiteTable
from rrst.likelihood import build_layout
from rrst.temporal import ObservationSet, TemporalBasis


def random_sites(rng, n, n_cov=2, kind=SiteKind.AQS_FIXED):
    coords = rng.uniform(0, 50, size=(n, 2))
    covs = rng.normal(size=(n, n_cov))
    return SiteTable([f"s{i:03d}" for i in range(n)], coords,
                     [kind] * n, covs, [f"c{k}" for k in range(n_cov)])


def random_trend_basis(rng, T, m):
    """Orthonormal mean-zero trend columns on a T-period grid."""
    cols = [np.ones(T)]
    if m > 1:
        raw = rng.normal(size=(T, m - 1))
        raw -= raw.mean(axis=0, keepdims=True)
        q, _ = np.linalg.qr(raw)
        q -= q.mean(axis=0, keepdims=True)
        q, _ = np.linalg.qr(q)
        cols.append(q[:, :m - 1])
    return TemporalBasis(np.arange(T), np.column_stack(cols))


def random_obs(rng, sites, T, p_obs=0.75):
    """Random unbalanced sampling pattern; every period keeps >= 1 site."""
    recs = []
    for t in range(T):
        mask = rng.random(len(sites.site_ids)) < p_obs
        if not mask.any():
            mask[rng.integers(len(mask))] = True
        for i in np.nonzero(mask)[0]:
            recs.append((sites.site_ids[i], t, 0.0))
    ids = [r[0] for r in recs]
    periods = np.array([r[1] for r in recs])
    vals = np.zeros(len(recs))
    return ObservationSet(ids, periods, vals)


def random_params(rng, m, nugget=True):
    theta_B = [ExpCovParams(phi=rng.uniform(5, 40), tau2=rng.uniform(0.2, 2.0))
               for _ in range(m)]
    theta_P = [float(rng.uniform(0.05, 0.8)) for _ in range(m)] if nugget else None
    theta_V = ExpCovParams(phi=rng.uniform(5, 40), tau2=rng.uniform(0.2, 2.0),
                           sigma2=rng.uniform(0.05, 0.8))
    return CovParams(theta_B, theta_V, theta_P)


def random_basis_spec(rng, sites, kind, K):
    if kind is BasisKind.NONE:
        return SpatialBasisSpec(BasisKind.NONE)
    if kind is BasisKind.LRK:
        idx = rng.choice(len(sites.site_ids), size=K, replace=False)
        return SpatialBasisSpec(BasisKind.LRK, K, KnotSet(sites.coords[idx]),
                                RangeMode.FIXED, fixed_range_km=float(rng.uniform(10, 50)))
    return SpatialBasisSpec(BasisKind.TPRS, K)


def dense_sigma(params, layout):
    """Explicit N x N marginal covariance (oracle)."""
    n, m, N = layout.n, layout.m, layout.N
    F = layout.F.toarray()
    sigma = np.zeros((N, N))
    Z_B = layout.Z_B_for(params)
    if Z_B is not None and Z_B.shape[1] > 0:
        kp = Z_B.shape[1] // m
        c_diag = np.concatenate([np.full(kp, th.tau2) for th in params.theta_B])
        sigma += F @ Z_B @ np.diag(c_diag) @ Z_B.T @ F.T
    if params.has_nugget:
        sigP = np.repeat(np.asarray(params.theta_P), n)
        sigma += F @ np.diag(sigP) @ F.T
    from rrst.covariance import cov_matrix
    snu = cov_matrix(layout.dists, params.theta_V)
    for t, rows, sidx, _f in layout.period_blocks:
        sigma[np.ix_(rows, rows)] += snu[np.ix_(sidx, sidx)]
    return sigma


def dense_profile_loglik(params, layout, y):
    """Dense-Cholesky evaluation of the profile log-likelihood (oracle)."""
    sigma = dense_sigma(params, layout)
    cf = cho_factor(sigma, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    FX = layout.FX
    si_fx = cho_solve(cf, FX)
    si_y = cho_solve(cf, y)
    alpha = np.linalg.solve(FX.T @ si_fx, FX.T @ si_y)
    r = y - FX @ alpha
    quad = float(r @ cho_solve(cf, r))
    N = layout.N
    return -0.5 * (logdet + quad + N * np.log(2 * np.pi)), alpha


def dense_predict_oracle(model, layout, y, tsites, pairs):
    """Joint-Gaussian conditional mean/covariance built from explicit dense
    covariance blocks over (training rows, target rows)."""
    from rrst.covariance import exp_corr
    from rrst.geometry import pairwise_distances

    params = model.params
    m, n, N = layout.m, layout.n, layout.N
    tbasis = model.tbasis
    tgt_site = np.array([p[0] for p in pairs])
    tgt_per = np.array([p[1] for p in pairs])
    n_tgt = len(pairs)
    f_tgt = tbasis.rows(tgt_per)

    # row descriptors: coords, period, trend row, for training then targets
    train_coords = np.zeros((N, 2))
    train_per = np.zeros(N, dtype=int)
    train_f = np.zeros((N, m))
    for t, rows, sidx, f in layout.period_blocks:
        train_coords[rows] = layout.coords[sidx]
        train_per[rows] = t
        train_f[rows] = f
    coords_all = np.vstack([train_coords, tsites.coords[tgt_site]])
    per_all = np.concatenate([train_per, tgt_per])
    f_all = np.vstack([train_f, f_tgt])
    M = N + n_tgt

    sigma = np.zeros((M, M))
    bases = model.bases
    if bases is not None:
        pen_train = [b.penalized for b in bases]
        pen_tgt = [b.rows_at(tsites.coords)[1][tgt_site] for b in bases]
        kp = pen_train[0].shape[1]
        u_all = np.zeros((M, m * kp))
        for j in range(m):
            cols = slice(j * kp, (j + 1) * kp)
            for t, rows, sidx, f in layout.period_blocks:
                u_all[rows, cols] = f[j] * pen_train[j][sidx]
            u_all[N:, cols] = f_tgt[:, j:j + 1] * pen_tgt[j]
        c_diag = np.concatenate([np.full(kp, th.tau2) for th in params.theta_B])
        sigma += (u_all * c_diag[None, :]) @ u_all.T
    d_all = pairwise_distances(coords_all, coords_all)
    same_site = d_all <= 1e-9
    if params.has_nugget:
        sigP = np.asarray(params.theta_P)
        sigma += same_site * (f_all @ (sigP[:, None] * f_all.T))
    same_per = per_all[:, None] == per_all[None, :]
    th_v = params.theta_V
    sigma += same_per * (th_v.tau2 * exp_corr(d_all, th_v.phi)
                         + th_v.sigma2 * same_site)

    # fixed-effect means on training and target rows
    mu_train = layout.FX @ model.alpha_hat
    sel = (model.spec.covariate_selection
           if model.spec.covariate_selection is not None
           else [list(model.sites.covariate_names)] * m)
    name_pos = {nm: k for k, nm in enumerate(tsites.covariate_names)}
    mu_tgt = np.zeros(n_tgt)
    c0 = 0
    for j in range(m):
        cols = [np.ones(tsites.n)]
        for nm in sel[j]:
            cols.append(tsites.covariates[:, name_pos[nm]])
        if bases is not None and bases[j].unpenalized.shape[1]:
            cols.append(bases[j].rows_at(tsites.coords)[0])
        Xj = np.column_stack(cols)
        a_j = model.alpha_hat[c0:c0 + Xj.shape[1]]
        c0 += Xj.shape[1]
        mu_tgt += f_tgt[:, j] * (Xj @ a_j)[tgt_site]

    s11 = sigma[:N, :N]
    s21 = sigma[N:, :N]
    s22 = sigma[N:, N:]
    cf = cho_factor(s11, lower=True)
    mean = mu_tgt + s21 @ cho_solve(cf, y - mu_train)
    cond = s22 - s21 @ cho_solve(cf, s21.T)
    return mean, cond
