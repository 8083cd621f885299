"""Reduced-rank spatial bases for the coefficient fields.

Two families are supported: low-rank kriging (exponential-kernel columns
anchored at knots, whitened by the inverse symmetric square root of the
knot correlation matrix) and thin plate regression splines (truncated
eigenbasis of the radial-kernel matrix with the polynomial constraint
absorbed). Both expose the same surface: an unpenalized block appended to
the fixed design, a penalized block whose coefficients carry an identity
penalty, and row evaluation at new locations.

TPRS constraint absorption: with W the orthonormal null basis of T'U_K,
the raw Wood columns U_K D_K W are not orthogonal to T. We additionally
project the reparameterized columns onto the orthogonal complement of
span(T) (moving their T-components into the unpenalized part of the
design), which makes T'Z* = 0 exact while leaving span(T, Z*), and hence
the rank-n interpolant, unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .covariance import exp_corr
from .geometry import KnotSet, pairwise_distances


class BasisKind(Enum):
    NONE = "none"
    LRK = "lrk"
    TPRS = "tprs"


class RangeMode(Enum):
    ESTIMATED = "est"
    FIXED = "fixed"


@dataclass
class SpatialBasisSpec:
    kind: BasisKind
    K: int = 0
    knots: KnotSet | None = None
    range_mode: RangeMode = RangeMode.ESTIMATED
    fixed_range_km: float | None = None

    def __post_init__(self):
        if self.kind is BasisKind.NONE and self.K != 0:
            raise ValueError("NONE basis requires K = 0")
        if self.kind is BasisKind.TPRS and self.K < 4:
            raise ValueError("TPRS requires K >= 4")
        if self.kind is BasisKind.LRK:
            if self.knots is None or self.knots.K != self.K:
                raise ValueError("LRK requires a knot set of size K")
            if self.range_mode is RangeMode.FIXED and not (
                    self.fixed_range_km and self.fixed_range_km > 0):
                raise ValueError("FIXED range mode requires a positive range value")


@dataclass
class SpatialBasis:
    """Realized spatial basis at the training sites."""

    kind: BasisKind
    unpenalized: np.ndarray  # (n, q) columns appended to the fixed design
    penalized: np.ndarray  # (n, K')
    range_dependent: bool = False
    diagnostics: list[str] = field(default_factory=list)
    # evaluation state for new locations
    _knots: np.ndarray | None = None
    _phi: float | None = None
    _omega_invsqrt: np.ndarray | None = None
    _std_center: np.ndarray | None = None
    _std_scale: float | None = None
    _train_std: np.ndarray | None = None
    _eta_proj: np.ndarray | None = None  # U_K W Q
    _t_correction: np.ndarray | None = None  # (3, K') projection coefficients

    @property
    def K_pen(self) -> int:
        return self.penalized.shape[1]

    def rows_at(self, coords_new) -> tuple[np.ndarray, np.ndarray]:
        """(unpenalized, penalized) basis rows at new planar-km locations."""
        coords_new = np.atleast_2d(np.asarray(coords_new, dtype=float))
        n_new = len(coords_new)
        if self.kind is BasisKind.NONE:
            return np.zeros((n_new, 0)), np.zeros((n_new, 0))
        if self.kind is BasisKind.LRK:
            z = exp_corr(pairwise_distances(coords_new, self._knots), self._phi)
            return np.zeros((n_new, 0)), z @ self._omega_invsqrt
        std = (coords_new - self._std_center) / self._std_scale
        e_rows = tps_eta(pairwise_distances(std, self._train_std))
        t_rows = np.column_stack([np.ones(n_new), std])
        pen = e_rows @ self._eta_proj - t_rows @ self._t_correction
        return std, pen


def tps_eta(r) -> np.ndarray:
    """Thin plate radial kernel r^2 log(r) / (8 pi), with value 0 at r = 0."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = (r[nz] ** 2) * np.log(r[nz]) / (8.0 * np.pi)
    return out


def _inv_sqrt_psd(mat: np.ndarray, floor_rel: float = 1e-12):
    """Inverse symmetric square root with an eigenvalue floor.

    Directions below floor_rel * max eigenvalue are dropped; returns the
    (possibly column-deficient) inverse root and the number dropped.
    """
    w, v = np.linalg.eigh(mat)
    floor = floor_rel * float(w.max())
    keep = w > floor
    if not np.any(keep):
        raise np.linalg.LinAlgError("matrix numerically singular; no usable directions")
    inv_root = v[:, keep] / np.sqrt(w[keep])[None, :]
    return inv_root, int((~keep).sum())


def lrk_basis(site_coords, knots: KnotSet, phi: float) -> SpatialBasis:
    """Low-rank kriging basis Z * Omega_knots^{-1/2} at range phi."""
    if not phi > 0:
        raise ValueError("phi must be > 0")
    coords = np.atleast_2d(np.asarray(site_coords, dtype=float))
    Z = exp_corr(pairwise_distances(coords, knots.knots), phi)
    omega = exp_corr(pairwise_distances(knots.knots, knots.knots), phi)
    inv_root, dropped = _inv_sqrt_psd(omega)
    diags = []
    if dropped:
        diags.append(f"dropped {dropped} near-singular knot-correlation directions")
    basis = SpatialBasis(
        kind=BasisKind.LRK,
        unpenalized=np.zeros((len(coords), 0)),
        penalized=Z @ inv_root,
        range_dependent=True,
        diagnostics=diags,
        _knots=knots.knots.copy(),
        _phi=float(phi),
        _omega_invsqrt=inv_root,
    )
    return basis


def _nullspace(mat: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(mat)
    rank = int((s > 1e-10 * (s[0] if len(s) else 1.0)).sum())
    return vt[rank:].T


def tprs_basis(site_coords, K: int) -> SpatialBasis:
    """Thin plate regression spline basis of rank K (K-3 penalized columns)."""
    coords = np.atleast_2d(np.asarray(site_coords, dtype=float))
    n = len(coords)
    if not 4 <= K <= n:
        raise ValueError(f"TPRS rank must be in [4, n={n}]")
    center = coords.mean(axis=0)
    scale = float(coords.std())
    if scale <= 0:
        raise ValueError("degenerate site layout: zero coordinate spread")
    std = (coords - center) / scale
    T = np.column_stack([np.ones(n), std])
    if np.linalg.matrix_rank(T) < 3:
        raise ValueError("sites are collinear; thin plate polynomial part is rank deficient")

    E = tps_eta(pairwise_distances(std, std))
    w, U = np.linalg.eigh(E)
    order = np.argsort(-np.abs(w))
    w, U = w[order], U[:, order]
    diags = []
    if K < n and abs(abs(w[K - 1]) - abs(w[K])) <= 1e-9 * max(abs(w[K - 1]), 1e-300):
        diags.append(f"eigenvalue magnitude tie at truncation rank {K}")
    UK = U[:, :K]
    DK = w[:K]

    W = _nullspace(T.T @ UK)
    if W.shape[1] != K - 3:
        raise ValueError("unexpected constraint null-space dimension")
    P = W.T @ (DK[:, None] * W)
    pw, pv = np.linalg.eigh(P)
    if pw.min() <= 1e-12 * pw.max():
        raise np.linalg.LinAlgError("TPRS penalty not positive definite after truncation")
    Q = pv @ np.diag(1.0 / np.sqrt(pw)) @ pv.T
    raw = (UK * DK[None, :]) @ W @ Q
    # absorb the span(T) component into the unpenalized design: T'Z* = 0 exactly
    t_coef = np.linalg.solve(T.T @ T, T.T @ raw)
    Zstar = raw - T @ t_coef

    basis = SpatialBasis(
        kind=BasisKind.TPRS,
        unpenalized=std.copy(),
        penalized=Zstar,
        range_dependent=False,
        diagnostics=diags,
        _std_center=center,
        _std_scale=scale,
        _train_std=std,
        _eta_proj=UK @ W @ Q,
        _t_correction=t_coef,
    )
    return basis


def none_basis(site_coords) -> SpatialBasis:
    coords = np.atleast_2d(np.asarray(site_coords, dtype=float))
    n = len(coords)
    return SpatialBasis(BasisKind.NONE, np.zeros((n, 0)), np.zeros((n, 0)))


def build_basis(spec: SpatialBasisSpec, site_coords, phi: float | None = None) -> SpatialBasis:
    """Realize a basis spec at the training sites.

    ``phi`` is required for LRK (the fixed value, or the current optimizer
    value in ESTIMATED mode).
    """
    if spec.kind is BasisKind.NONE:
        return none_basis(site_coords)
    if spec.kind is BasisKind.LRK:
        if phi is None:
            phi = spec.fixed_range_km
        if phi is None:
            raise ValueError("LRK basis needs a range value")
        return lrk_basis(site_coords, spec.knots, phi)
    return tprs_basis(site_coords, spec.K)


def assemble_Z_B(basis: SpatialBasis, m: int) -> np.ndarray:
    """Block-diagonal (m*n) x (m*K') matrix with m copies of the penalized block."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return assemble_Z_B_blocks([basis] * m)


def assemble_Z_B_blocks(bases: list[SpatialBasis]) -> np.ndarray:
    """Block-diagonal matrix from per-trend penalized blocks (may differ per field)."""
    n = bases[0].penalized.shape[0]
    cols = [b.penalized.shape[1] for b in bases]
    out = np.zeros((n * len(bases), sum(cols)))
    c0 = 0
    for j, b in enumerate(bases):
        out[j * n:(j + 1) * n, c0:c0 + cols[j]] = b.penalized
        c0 += cols[j]
    return out
