"""Exponential covariance kernel and covariance-block construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError


@dataclass
class ExpCovParams:
    """Exponential decay covariance: range (km), partial sill, nugget."""

    phi: float
    tau2: float
    sigma2: float = 0.0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"range phi must be > 0, got {self.phi}")
        if self.tau2 < 0 or self.sigma2 < 0:
            raise ValueError("variances must be >= 0")


@dataclass
class CovParams:
    """Covariance parameters for the coefficient fields and the residual field.

    ``theta_B[j]`` holds the range/partial-sill of coefficient field j
    (nugget fixed at 0 there); ``theta_P`` holds the per-field nugget
    variances when the model includes them; ``theta_V`` is the residual
    field with its own nugget.
    """

    theta_B: list[ExpCovParams]
    theta_V: ExpCovParams
    theta_P: list[float] | None = None

    def __post_init__(self):
        for th in self.theta_B:
            if th.sigma2 != 0.0:
                raise ValueError("coefficient-field nugget lives in theta_P, not theta_B")
        if self.theta_P is not None:
            if len(self.theta_P) != len(self.theta_B):
                raise ValueError("theta_P length must equal number of trend fields")
            if any(s < 0 for s in self.theta_P):
                raise ValueError("nugget variances must be >= 0")

    @property
    def m(self) -> int:
        return len(self.theta_B)

    @property
    def has_nugget(self) -> bool:
        return self.theta_P is not None


def exp_corr(r, phi: float):
    """exp(-r/phi) correlation; r >= 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    if not phi > 0:
        raise ValueError("phi must be > 0")
    return np.exp(-r / phi)


def cov_matrix(dists: np.ndarray, params: ExpCovParams) -> np.ndarray:
    """tau2 * exp(-d/phi) + sigma2 on the diagonal."""
    d = np.asarray(dists, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    cov = params.tau2 * exp_corr(d, params.phi)
    if params.sigma2 > 0:
        cov = cov + params.sigma2 * np.eye(len(d))
    return cov


def chol_psd(mat: np.ndarray, jitter_scale: float | None = None):
    """Cholesky with a single diagonal-jitter retry for nugget-free matrices.

    Returns a (cho_factor result, jittered flag) pair. ``jitter_scale``
    defaults to the largest diagonal entry.
    """
    try:
        return cho_factor(mat, lower=True), False
    except LinAlgError:
        pass
    scale = jitter_scale if jitter_scale is not None else float(np.max(np.diag(mat)))
    jittered = mat + 1e-10 * max(scale, 1.0) * np.eye(len(mat))
    try:
        return cho_factor(jittered, lower=True), True
    except LinAlgError as exc:
        raise LinAlgError("covariance matrix not positive definite after jitter") from exc


def chol_logdet(cf) -> float:
    """log-determinant from a cho_factor result."""
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def solve_chol(cf, b):
    return cho_solve(cf, b)
