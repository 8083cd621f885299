"""Smooth temporal trend estimation and the sparse observation-to-coefficient map.

Trends are estimated from the incomplete site-by-period data matrix by
iterative SVD completion: missing entries are initialized from site and
period means, the column-centered matrix is repeatedly truncated to rank
m-1 and re-imputed, and the converged leading left singular vectors are
smoothed with a cubic smoothing spline and re-orthonormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
import scipy.sparse as sp

PERIOD_DAYS = 14


class CompletionError(RuntimeError):
    """SVD completion failed to converge; carries the per-iteration trace."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class ObservationSet:
    """Sparse (site, period) log-concentration records.

    Records are kept in the model's stacking order: period-major,
    site-minor (site varying fastest within a period).
    """

    site_ids: list[str]
    periods: np.ndarray  # integer period index per record
    values: np.ndarray
    anchor: date | None = None  # start date of period 0

    def __post_init__(self):
        self.periods = np.asarray(self.periods, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if not (len(self.site_ids) == len(self.periods) == len(self.values)):
            raise ValueError("record fields must have equal length")
        order = np.lexsort((np.asarray(self.site_ids), self.periods))
        self.site_ids = [self.site_ids[i] for i in order]
        self.periods = self.periods[order]
        self.values = self.values[order]
        keys = list(zip(self.site_ids, self.periods.tolist()))
        if len(set(keys)) != len(keys):
            raise ValueError("at most one record per (site, period)")

    @property
    def N(self) -> int:
        return len(self.values)

    def site_counts(self) -> dict[int, int]:
        """n_t: number of sites observed at each period."""
        uniq, counts = np.unique(self.periods, return_counts=True)
        return dict(zip(uniq.tolist(), counts.tolist()))

    def unique_sites(self) -> list[str]:
        return sorted(set(self.site_ids))

    def for_site(self, site_id: str):
        mask = np.array([s == site_id for s in self.site_ids])
        return self.periods[mask], self.values[mask]

    def restrict_sites(self, keep: set[str]) -> "ObservationSet":
        mask = np.array([s in keep for s in self.site_ids])
        return ObservationSet(
            [s for s, k in zip(self.site_ids, mask) if k],
            self.periods[mask], self.values[mask], self.anchor)

    def period_date(self, period: int) -> date:
        if self.anchor is None:
            raise ValueError("observation set has no anchor date")
        return self.anchor + timedelta(days=PERIOD_DAYS * int(period))


@dataclass
class TemporalBasis:
    """m smooth temporal basis columns on the period grid; column 1 is constant 1."""

    periods: np.ndarray  # (T,) integer period indices
    values: np.ndarray  # (T, m)
    anchor: date | None = None

    def __post_init__(self):
        self.periods = np.asarray(self.periods, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.periods):
            raise ValueError("values must be (T, m)")
        if not np.allclose(self.values[:, 0], 1.0):
            raise ValueError("first basis column must be identically 1")
        cols = self.values[:, 1:]
        if cols.shape[1]:
            if np.max(np.abs(cols.mean(axis=0))) > 1e-8:
                raise ValueError("trend columns must have mean 0")
            gram = cols.T @ cols
            off = gram - np.diag(np.diag(gram))
            if np.max(np.abs(off)) > 1e-8 * max(1.0, np.max(np.diag(gram))):
                raise ValueError("trend columns must be mutually orthogonal")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return len(self.periods)

    def row(self, period: int) -> np.ndarray:
        idx = np.searchsorted(self.periods, period)
        if idx >= len(self.periods) or self.periods[idx] != period:
            raise KeyError(f"period {period} not in temporal basis grid")
        return self.values[idx]

    def rows(self, periods) -> np.ndarray:
        return np.vstack([self.row(int(t)) for t in np.asarray(periods)])


def _second_diff_penalty(x: np.ndarray):
    """Natural cubic smoothing-spline penalty K = D^T W^{-1} D (Green-Silverman)."""
    T = len(x)
    h = np.diff(x).astype(float)
    D = np.zeros((T - 2, T))
    W = np.zeros((T - 2, T - 2))
    for i in range(T - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -(1.0 / h[i] + 1.0 / h[i + 1])
        D[i, i + 2] = 1.0 / h[i + 1]
        W[i, i] = (h[i] + h[i + 1]) / 3.0
        if i > 0:
            W[i, i - 1] = W[i - 1, i] = h[i] / 6.0
    return D.T @ np.linalg.solve(W, D)


def smoothing_hat_matrix(x, df: float) -> np.ndarray:
    """Cubic smoothing-spline hat matrix with effective degrees of freedom df.

    The smoothing parameter is found by bisection on trace((I + lam*K)^-1).
    """
    x = np.asarray(x, dtype=float)
    T = len(x)
    if T < 4:
        raise ValueError("need at least 4 points to smooth")
    if not 2.0 <= df <= T:
        raise ValueError(f"df must be in [2, {T}]")
    K = _second_diff_penalty(x)
    eye = np.eye(T)

    def trace_df(loglam):
        return float(np.trace(np.linalg.solve(eye + np.exp(loglam) * K, eye)))

    lo, hi = -30.0, 30.0
    # trace is decreasing in lam
    if trace_df(lo) <= df:
        lam = np.exp(lo)
    elif trace_df(hi) >= df:
        lam = np.exp(hi)
    else:
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if trace_df(mid) > df:
                lo = mid
            else:
                hi = mid
        lam = np.exp(0.5 * (lo + hi))
    return np.linalg.solve(eye + lam * K, eye)


def default_smooth_df(periods: np.ndarray) -> int:
    """8 effective degrees of freedom per calendar year of data span."""
    span_years = (periods.max() - periods.min() + 1) * PERIOD_DAYS / 365.25
    return int(max(4, min(len(periods) - 1, round(8 * span_years))))


def estimate_temporal_basis(obs: ObservationSet, m: int,
                            smooth_df: float | None = None,
                            tol: float = 1e-6, max_iter: int = 500) -> TemporalBasis:
    """Estimate m temporal basis columns from incomplete monitoring data."""
    if m < 1:
        raise ValueError("m must be >= 1")
    periods = np.unique(obs.periods)
    grid = np.arange(periods.min(), periods.max() + 1)
    T = len(grid)
    if m == 1:
        return TemporalBasis(grid, np.ones((T, 1)), obs.anchor)

    sites = obs.unique_sites()
    n_per_site = {s: 0 for s in sites}
    for s in obs.site_ids:
        n_per_site[s] += 1
    if sum(1 for s in sites if n_per_site[s] >= 2 * m) < m:
        raise ValueError(
            f"insufficient temporal coverage: need >= {m} sites with >= {2 * m} observed periods")
    if smooth_df is None:
        smooth_df = default_smooth_df(grid)
    if smooth_df < 2:
        raise ValueError("smooth_df must be >= 2")

    site_pos = {s: k for k, s in enumerate(sites)}
    period_pos = {int(t): k for k, t in enumerate(grid)}
    M = np.full((T, len(sites)), np.nan)
    for s, t, v in zip(obs.site_ids, obs.periods, obs.values):
        M[period_pos[int(t)], site_pos[s]] = v
    missing = np.isnan(M)

    # initialize: site mean + period-mean anomaly
    overall = np.nanmean(M)
    site_mean = np.nanmean(np.where(missing, np.nan, M), axis=0)
    site_mean = np.where(np.isnan(site_mean), overall, site_mean)
    with np.errstate(all="ignore"):
        period_anom = np.nanmean(M - site_mean[None, :], axis=1)
    period_anom = np.where(np.isnan(period_anom), 0.0, period_anom)
    M[missing] = (site_mean[None, :] + period_anom[:, None])[missing]

    rank = m - 1
    trace: list[float] = []
    for it in range(max_iter):
        col_means = M.mean(axis=0)
        C = M - col_means[None, :]
        U, svals, Vt = np.linalg.svd(C, full_matrices=False)
        recon = (U[:, :rank] * svals[:rank]) @ Vt[:rank] + col_means[None, :]
        change = float(np.linalg.norm(recon[missing] - M[missing]))
        denom = float(np.linalg.norm(M[missing])) + 1e-12
        trace.append(change)
        M[missing] = recon[missing]
        if change / denom < tol:
            break
    else:
        raise CompletionError(
            f"SVD completion did not converge in {max_iter} iterations", trace)

    col_means = M.mean(axis=0)
    U, svals, Vt = np.linalg.svd(M - col_means[None, :], full_matrices=False)
    raw = U[:, :rank]

    hat = smoothing_hat_matrix(grid.astype(float), float(smooth_df))
    smooth = hat @ raw
    smooth -= smooth.mean(axis=0, keepdims=True)
    # Gram-Schmidt orthonormalization of the smoothed, centered columns
    q, _ = np.linalg.qr(smooth)
    cols = q[:, :rank]
    cols -= cols.mean(axis=0, keepdims=True)
    q, _ = np.linalg.qr(cols)
    cols = q[:, :rank]

    # sign convention: align with the first site's centered series
    first = sites[0]
    t_first, v_first = obs.for_site(first)
    resid = v_first - v_first.mean()
    rows = np.array([period_pos[int(t)] for t in t_first])
    for k in range(rank):
        ip = float(cols[rows, k] @ resid)
        if ip < 0:
            cols[:, k] *= -1.0

    values = np.column_stack([np.ones(T), cols])
    basis = TemporalBasis(grid, values, obs.anchor)
    basis.completion_trace = trace
    return basis


def build_F(obs: ObservationSet, basis: TemporalBasis, site_ids: list[str]) -> sp.csr_matrix:
    """Sparse N x (m*n) map from stacked per-site trend coefficients to observations.

    Row for observation (s, t) has f_i(t) at column (i-1)*n + index(s).
    """
    n = len(site_ids)
    pos = {s: k for k, s in enumerate(site_ids)}
    m = basis.m
    rows, cols, vals = [], [], []
    for r, (s, t) in enumerate(zip(obs.site_ids, obs.periods)):
        if s not in pos:
            raise KeyError(f"observation at unknown site {s!r}")
        f = basis.row(int(t))
        for i in range(m):
            rows.append(r)
            cols.append(i * n + pos[s])
            vals.append(f[i])
    return sp.csr_matrix((vals, (rows, cols)), shape=(obs.N, m * n))


def site_trend_fit(periods, values, basis: TemporalBasis):
    """Least-squares fit of one site's series on the temporal basis columns.

    Returns (coefficients, fitted values at the site's observed periods).
    """
    periods = np.asarray(periods, dtype=int)
    values = np.asarray(values, dtype=float)
    if len(values) < basis.m:
        raise ValueError("site has fewer observations than basis columns")
    design = basis.rows(periods)
    if np.linalg.matrix_rank(design) < basis.m:
        raise ValueError("rank-deficient local design at this site")
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return coef, design @ coef
