"""Profile log-likelihood via block covariance identities.

The marginal covariance of the stacked observations is

    Sigma = F Z_B C Z_B' F' + F Sigma_P F' + Sigma_V

with C the diagonal coefficient-variance block, Sigma_P the diagonal
per-site nugget block and Sigma_V block-diagonal over periods. Neither
the N x N matrix nor its inverse is ever formed: Sigma_V solves are done
per period block, the nugget layer is folded in with the Woodbury
identity through M = Sigma_P^{-1} + F' Sigma_V^{-1} F, and the basis
layer through G = C^{-1} + U' A^{-1} U with U = F Z_B. The matching
determinant factorization gives log|Sigma| from the same factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor as scipy_cho_factor, cho_solve

from .basis import BasisKind, RangeMode, SpatialBasis, SpatialBasisSpec, assemble_Z_B_blocks, build_basis
from .covariance import CovParams, cov_matrix, chol_logdet, chol_psd
from .geometry import SiteTable, pairwise_distances
from .temporal import ObservationSet, TemporalBasis, build_F

LOG_2PI = float(np.log(2.0 * np.pi))


class RankDeficientError(ValueError):
    """The fixed-effect design FX is rank deficient."""

    def __init__(self, msg, columns=None):
        super().__init__(msg)
        self.columns = columns or []


@dataclass
class ModelLayout:
    """Immutable per-dataset structure shared across likelihood evaluations."""

    site_ids: list[str]
    coords: np.ndarray  # (n, 2)
    dists: np.ndarray  # (n, n)
    m: int
    F: sp.csr_matrix  # N x (m n)
    X: np.ndarray  # (m n) x P block-diagonal fixed design
    FX: np.ndarray  # N x P
    column_labels: list[str]
    # per period: (period, observation row idx, site idx, trend values f(t))
    period_blocks: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]]
    basis_spec: SpatialBasisSpec | None = None
    bases: list[SpatialBasis] | None = None  # per-trend realized bases (None until built)
    Z_B: np.ndarray | None = None  # cached when the basis is range-independent

    @property
    def n(self) -> int:
        return len(self.site_ids)

    @property
    def N(self) -> int:
        return self.F.shape[0]

    def bases_for(self, params: CovParams) -> list[SpatialBasis] | None:
        """Per-trend bases, rebuilding range-dependent ones at current params."""
        if self.basis_spec is None or self.basis_spec.kind is BasisKind.NONE:
            return None
        if (self.basis_spec.kind is BasisKind.LRK
                and self.basis_spec.range_mode is RangeMode.ESTIMATED):
            return [build_basis(self.basis_spec, self.coords, th.phi)
                    for th in params.theta_B]
        return self.bases

    def Z_B_for(self, params: CovParams) -> np.ndarray | None:
        if self.basis_spec is None or self.basis_spec.kind is BasisKind.NONE:
            return None
        if (self.basis_spec.kind is BasisKind.LRK
                and self.basis_spec.range_mode is RangeMode.ESTIMATED):
            return assemble_Z_B_blocks(self.bases_for(params))
        return self.Z_B


@dataclass
class LogLikResult:
    value: float
    alpha_hat: np.ndarray
    path: str
    diagnostics: dict = field(default_factory=dict)


def build_layout(sites: SiteTable, obs: ObservationSet, tbasis: TemporalBasis,
                 basis_spec: SpatialBasisSpec | None = None,
                 covariate_selection: list[list[str]] | None = None,
                 fixed_phi: float | None = None) -> ModelLayout:
    """Assemble the design structures for one dataset and model choice.

    ``covariate_selection`` gives covariate names per trend; default is all
    covariates for every trend. For LRK with a fixed range (or TPRS/NONE)
    the basis is realized once here; in ESTIMATED mode realization is
    deferred to each likelihood evaluation.
    """
    m = tbasis.m
    site_ids = list(sites.site_ids)
    n = len(site_ids)
    if covariate_selection is None:
        covariate_selection = [list(sites.covariate_names)] * m
    if len(covariate_selection) != m:
        raise ValueError("covariate_selection must have one entry per trend")

    bases = None
    unpen = np.zeros((n, 0))
    Z_B = None
    if basis_spec is not None and basis_spec.kind is not BasisKind.NONE:
        if not (basis_spec.kind is BasisKind.LRK
                and basis_spec.range_mode is RangeMode.ESTIMATED):
            phi = fixed_phi if fixed_phi is not None else basis_spec.fixed_range_km
            b = build_basis(basis_spec, sites.coords, phi)
            bases = [b] * m
            unpen = b.unpenalized
            Z_B = assemble_Z_B_blocks(bases)
        elif basis_spec.kind is BasisKind.TPRS:
            raise ValueError("TPRS basis is never range-dependent")

    name_pos = {nm: k for k, nm in enumerate(sites.covariate_names)}
    blocks, labels = [], []
    for j, sel in enumerate(covariate_selection):
        cols = [np.ones(n)]
        labels.append(f"f{j + 1}:intercept")
        for nm in sel:
            if nm not in name_pos:
                raise KeyError(f"unknown covariate {nm!r}")
            cols.append(sites.covariates[:, name_pos[nm]])
            labels.append(f"f{j + 1}:{nm}")
        for q in range(unpen.shape[1]):
            cols.append(unpen[:, q])
            labels.append(f"f{j + 1}:basis_unpen{q}")
        blocks.append(np.column_stack(cols))
    P = sum(b.shape[1] for b in blocks)
    X = np.zeros((m * n, P))
    c0 = 0
    for j, b in enumerate(blocks):
        X[j * n:(j + 1) * n, c0:c0 + b.shape[1]] = b
        c0 += b.shape[1]

    F = build_F(obs, tbasis, site_ids)
    FX = F @ X

    pos = {s: k for k, s in enumerate(site_ids)}
    period_blocks = []
    rec_periods = obs.periods
    for t in np.unique(rec_periods):
        rows = np.nonzero(rec_periods == t)[0]
        sidx = np.array([pos[obs.site_ids[r]] for r in rows])
        period_blocks.append((int(t), rows, sidx, tbasis.row(int(t))))

    return ModelLayout(site_ids, sites.coords.copy(),
                       pairwise_distances(sites.coords, sites.coords),
                       m, F, X, FX, labels, period_blocks,
                       basis_spec=basis_spec, bases=bases, Z_B=Z_B)


class BlockSolver:
    """One-evaluation factorization of Sigma for solves and the log-determinant.

    Period blocks with identical site sets share a single Cholesky factor.
    """

    def __init__(self, params: CovParams, layout: ModelLayout,
                 full_rank: bool = False):
        if params.m != layout.m:
            raise ValueError("parameter trend count does not match layout")
        if full_rank and layout.basis_spec is not None \
                and layout.basis_spec.kind is not BasisKind.NONE:
            raise ValueError(
                "full-rank evaluation takes a layout without a reduced-rank basis")
        self.layout = layout
        self.params = params
        n, m = layout.n, layout.m
        snu = cov_matrix(layout.dists, params.theta_V)

        self._factors = {}
        cache = {}
        self.logdet_SV = 0.0
        self.jittered_blocks = []
        for t, rows, sidx, _f in layout.period_blocks:
            key = tuple(sidx.tolist())
            if key not in cache:
                try:
                    cf, jit = chol_psd(snu[np.ix_(sidx, sidx)])
                except np.linalg.LinAlgError as exc:
                    raise np.linalg.LinAlgError(
                        f"residual covariance block at period {t} not positive definite") from exc
                cache[key] = (cf, jit)
            cf, jit = cache[key]
            if jit:
                self.jittered_blocks.append(t)
            self._factors[t] = (cf, rows)
            self.logdet_SV += chol_logdet(cf)

        self.path = "NUGGET" if params.has_nugget else "NO_NUGGET"
        self._cM = None
        self.logdet_A = self.logdet_SV
        M = None
        mid_logdet = 0.0
        if full_rank:
            # the site-coefficient covariance keeps its full per-trend
            # spatial blocks tau2 * corr(phi) + sigma_P^2 I, so one mn x mn
            # factorization replaces the separate nugget and basis layers
            self.path = "FULL_RANK"
            sigP = list(params.theta_P) if params.has_nugget else [0.0] * m
            M = np.zeros((m * n, m * n))
            for j, (th, s2) in enumerate(zip(params.theta_B, sigP)):
                S = cov_matrix(layout.dists, th) + s2 * np.eye(n)
                cf, _ = chol_psd(S)
                M[j * n:(j + 1) * n, j * n:(j + 1) * n] = cho_solve(cf, np.eye(n))
                mid_logdet += chol_logdet(cf)
        elif params.has_nugget:
            if any(s <= 0 for s in params.theta_P):
                raise ValueError("nugget path requires strictly positive theta_P")
            sigP = np.repeat(np.asarray(params.theta_P, dtype=float), n)
            M = np.diag(1.0 / sigP)
            mid_logdet = float(np.sum(np.log(sigP)))
        if M is not None:
            vinv_cache = {}
            for t, rows, sidx, f in layout.period_blocks:
                key = tuple(sidx.tolist())
                if key not in vinv_cache:
                    cf, _ = self._factors[t]
                    vinv_cache[key] = cho_solve(cf, np.eye(len(sidx)))
                vinv = vinv_cache[key]
                for i in range(m):
                    ii = i * n + sidx
                    for k in range(m):
                        M[np.ix_(ii, k * n + sidx)] += f[i] * f[k] * vinv
            cM, _ = chol_psd(M)
            self._cM = cM
            self.logdet_A = mid_logdet + self.logdet_SV + chol_logdet(cM)

        Z_B = layout.Z_B_for(params)
        self._cG = None
        self.logdet = self.logdet_A
        self._U = None
        self._AiU = None
        if Z_B is not None and Z_B.shape[1] > 0:
            if any(th.tau2 <= 0 for th in params.theta_B):
                raise ValueError("basis path requires strictly positive tau2 per field")
            kprimes = [Z_B.shape[1] // m] * m
            c_diag = np.concatenate([np.full(kp, th.tau2)
                                     for kp, th in zip(kprimes, params.theta_B)])
            U = layout.F @ Z_B
            AiU = self._a_solve(U)
            G = np.diag(1.0 / c_diag) + U.T @ AiU
            cG, _ = chol_psd(G)
            self._U, self._AiU, self._cG = U, AiU, cG
            self.logdet = (float(np.sum(np.log(c_diag))) + self.logdet_A
                           + chol_logdet(cG))

    def sv_solve(self, X: np.ndarray) -> np.ndarray:
        out = np.empty_like(X)
        for t, (cf, rows) in self._factors.items():
            out[rows] = cho_solve(cf, X[rows])
        return out

    def _a_solve(self, X: np.ndarray) -> np.ndarray:
        t1 = self.sv_solve(X)
        if self._cM is None:
            return t1
        F = self.layout.F
        t2 = F.T @ t1
        t3 = cho_solve(self._cM, t2)
        return t1 - self.sv_solve(F @ t3)

    def solve(self, X: np.ndarray) -> np.ndarray:
        """Sigma^{-1} X without forming Sigma."""
        squeeze = X.ndim == 1
        Xm = X[:, None] if squeeze else X
        ai = self._a_solve(Xm)
        if self._cG is not None:
            ai = ai - self._AiU @ cho_solve(self._cG, self._U.T @ ai)
        return ai.ravel() if squeeze else ai


def gls_alpha(params: CovParams, layout: ModelLayout, y: np.ndarray,
              solver: BlockSolver | None = None):
    """GLS estimate of the fixed-effect coefficients under Sigma(params).

    Returns (alpha_hat, Sigma^{-1}[FX | y], solver).
    """
    solver = solver or BlockSolver(params, layout)
    FX = layout.FX
    P = FX.shape[1]
    dep = _dependent_columns(FX, layout.column_labels)
    if dep:
        raise RankDeficientError(
            f"fixed-effect design is rank deficient; dependent columns: {dep}", dep)
    W = solver.solve(np.column_stack([FX, y]))
    xtx = FX.T @ W[:, :P]
    xty = FX.T @ W[:, P]
    try:
        cf = scipy_cho_factor(xtx, lower=True)
    except np.linalg.LinAlgError:
        raise RankDeficientError("GLS normal equations not positive definite")
    alpha = cho_solve(cf, xty)
    return alpha, W, solver


def _dependent_columns(FX: np.ndarray, labels: list[str]) -> list[str]:
    from scipy.linalg import qr
    _, R, piv = qr(FX, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    bad = diag <= 1e-10 * max(diag.max(), 1.0)
    return [labels[piv[k]] for k in np.nonzero(bad)[0]]


def profile_loglik(params: CovParams, layout: ModelLayout, y: np.ndarray,
                   full_rank: bool = False) -> LogLikResult:
    """Profile log-likelihood -0.5 [log|Sigma| + r' Sigma^{-1} r + N log 2pi].

    With ``full_rank`` the per-trend site coefficients carry their full
    spatial covariance instead of a reduced-rank basis; the layout must not
    declare a basis in that case.
    """
    y = np.asarray(y, dtype=float)
    solver = BlockSolver(params, layout, full_rank=full_rank) if full_rank else None
    alpha, W, solver = gls_alpha(params, layout, y, solver)
    P = layout.FX.shape[1]
    r = y - layout.FX @ alpha
    sir = W[:, P] - W[:, :P] @ alpha
    quad = float(r @ sir)
    value = -0.5 * (solver.logdet + quad + layout.N * LOG_2PI)
    if not np.isfinite(value):
        raise FloatingPointError(
            f"non-finite profile log-likelihood at params {params!r}")
    diagnostics = {"jittered_blocks": solver.jittered_blocks,
                   "logdet": solver.logdet, "quad": quad}
    return LogLikResult(value, alpha, solver.path, diagnostics)


def finite_diff_gradient(fun, x: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                         rel_step: float = 1e-5):
    """Central finite differences with one-sided fallback at box boundaries.

    Returns (gradient, one_sided flags). Steps are relative to |x| (absolute
    near zero).
    """
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    one_sided = np.zeros(len(x), dtype=bool)
    for k in range(len(x)):
        h = rel_step * max(abs(x[k]), 1.0)
        lo_ok = x[k] - h >= lower[k]
        hi_ok = x[k] + h <= upper[k]
        xp, xm = x.copy(), x.copy()
        if lo_ok and hi_ok:
            xp[k] += h
            xm[k] -= h
            grad[k] = (fun(xp) - fun(xm)) / (2 * h)
        elif hi_ok:
            xp[k] += h
            grad[k] = (fun(xp) - fun(x)) / h
            one_sided[k] = True
        else:
            xm[k] -= h
            grad[k] = (fun(x) - fun(xm)) / h
            one_sided[k] = True
    return grad, one_sided
