"""Planar site geometry: distances, space-filling knot selection, grid candidates.

Coordinates are assumed to be already projected to planar kilometers;
no geodesy is performed anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import ConvexHull, QhullError


class SiteKind(Enum):
    AQS_FIXED = "fixed"
    SNAPSHOT = "snapshot"
    HOME = "home"


class KnotSource(Enum):
    MONITOR_SITES = "sites"
    GRID = "grid"


@dataclass
class SiteTable:
    """Monitoring sites: ids, planar km coordinates, land-use covariates.

    ``covariates`` is an (n, p) matrix whose columns are named by
    ``covariate_names``; per-trend design matrices select columns from it.
    """

    site_ids: list[str]
    coords: np.ndarray  # (n, 2), kilometers
    kinds: list[SiteKind]
    covariates: np.ndarray  # (n, p)
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        n = len(self.site_ids)
        if len(set(self.site_ids)) != n:
            raise ValueError("site_id values must be unique")
        if self.coords.shape != (n, 2):
            raise ValueError(f"coords must be ({n}, 2), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("site coordinates must be finite")
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise ValueError("covariates must be a 2-d array with one row per site")
        if not self.covariate_names:
            self.covariate_names = [f"cov{k}" for k in range(self.covariates.shape[1])]
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValueError("covariate_names length mismatch")
        if len(self.kinds) != n:
            raise ValueError("kinds length mismatch")

    @property
    def n(self) -> int:
        return len(self.site_ids)

    def index_of(self, site_id: str) -> int:
        try:
            return self.site_ids.index(site_id)
        except ValueError:
            raise KeyError(f"unknown site_id {site_id!r}") from None

    def ids_of_kind(self, kind: SiteKind) -> list[str]:
        return [sid for sid, k in zip(self.site_ids, self.kinds) if k is kind]

    def subset(self, ids: list[str]) -> "SiteTable":
        """New table restricted to ``ids``, keeping this table's ordering."""
        keep = set(ids)
        idx = [i for i, sid in enumerate(self.site_ids) if sid in keep]
        if len(idx) != len(keep):
            missing = keep - set(self.site_ids)
            raise KeyError(f"unknown site ids {sorted(missing)}")
        return SiteTable([self.site_ids[i] for i in idx], self.coords[idx],
                         [self.kinds[i] for i in idx], self.covariates[idx],
                         list(self.covariate_names))


@dataclass
class KnotSet:
    knots: np.ndarray  # (K, 2), kilometers
    source: KnotSource = KnotSource.MONITOR_SITES

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float).reshape(-1, 2)
        if len(self.knots) < 1:
            raise ValueError("need at least one knot")
        if len(np.unique(self.knots, axis=0)) != len(self.knots):
            raise ValueError("knot locations must be distinct")

    @property
    def K(self) -> int:
        return len(self.knots)


def pairwise_distances(a, b) -> np.ndarray:
    """Euclidean distance matrix between two point lists (km)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty coordinate list")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("coordinates must be finite")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def coverage_criterion(candidates: np.ndarray, selected: np.ndarray) -> float:
    """Sum over candidates of distance to the nearest selected point."""
    d = pairwise_distances(candidates, selected)
    return float(d.min(axis=1).sum())


def select_knots(candidates, K: int, seed: int = 0,
                 source: KnotSource = KnotSource.MONITOR_SITES) -> KnotSet:
    """Pick K candidate points approximately minimizing the coverage criterion.

    Greedy seeding followed by point-swap descent to a local optimum
    (power-1 cover design). Deterministic; ties broken by lowest
    candidate index. ``seed`` is accepted for interface stability but the
    procedure has no random component.
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    ncand = len(cands)
    if not 1 <= K <= ncand:
        raise ValueError(f"K must be in [1, {ncand}], got {K}")
    if K == ncand:
        return KnotSet(cands.copy(), source)

    dmat = pairwise_distances(cands, cands)
    selected: list[int] = []
    # greedy: each step add the candidate giving the lowest criterion
    nearest = np.full(ncand, np.inf)
    for _ in range(K):
        scores = np.minimum(nearest[None, :], dmat).sum(axis=1)
        scores[selected] = np.inf
        j = int(np.argmin(scores))
        selected.append(j)
        nearest = np.minimum(nearest, dmat[j])

    # swap descent
    sel = list(selected)
    improved = True
    while improved:
        improved = False
        current = _criterion_from_sel(dmat, sel)
        for pos in range(K):
            best_j, best_val = sel[pos], current
            others = sel[:pos] + sel[pos + 1:]
            base = dmat[others].min(axis=0) if others else np.full(ncand, np.inf)
            for j in range(ncand):
                if j in sel:
                    continue
                val = float(np.minimum(base, dmat[j]).sum())
                if val < best_val - 1e-12:
                    best_j, best_val = j, val
            if best_j != sel[pos]:
                sel[pos] = best_j
                current = best_val
                improved = True
    sel = sorted(sel)
    return KnotSet(cands[sel], source)


def _criterion_from_sel(dmat: np.ndarray, sel: list[int]) -> float:
    return float(dmat[sel].min(axis=0).sum())


def grid_candidates(sites: SiteTable, cell_km: float) -> np.ndarray:
    """Centers of square grid cells of side ``cell_km`` inside the convex hull."""
    if cell_km <= 0:
        raise ValueError("cell_km must be positive")
    pts = sites.coords
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise ValueError("sites are collinear or degenerate; no convex hull") from exc
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    nx = max(1, int(np.ceil((hi[0] - lo[0]) / cell_km)))
    ny = max(1, int(np.ceil((hi[1] - lo[1]) / cell_km)))
    xs = lo[0] + cell_km * (np.arange(nx) + 0.5)
    ys = lo[1] + cell_km * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    # keep centers inside the hull: all facet inequalities A x + b <= 0
    A = hull.equations[:, :2]
    b = hull.equations[:, 2]
    inside = (centers @ A.T + b <= 1e-9).all(axis=1)
    return centers[inside]
