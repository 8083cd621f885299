"""Cross-validation protocols and scoring metrics.

Validation is site-level tenfold within one monitor class: the held-out
class sites are removed entirely from the training data, every other
observation stays in. Scores are reported on the two-week scale, on the
long-term-average (LTA) scale, per season for snapshot-style campaigns,
and detrended against a per-period fixed-site reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fit import FitError, ModelSpec, data_fingerprint, fit
from .geometry import SiteKind, SiteTable
from .predict import PredictionRequest, long_term_average, predict
from .temporal import ObservationSet, estimate_temporal_basis


@dataclass
class CVPlan:
    """Site-level fold assignment for one monitor class."""

    monitor_class: SiteKind
    folds: dict[str, int]  # site_id -> fold in 1..k
    seed: int
    k: int = 10

    def __post_init__(self):
        labels = set(self.folds.values())
        if not labels or min(labels) < 1 or max(labels) > self.k:
            raise ValueError("fold labels must lie in 1..k")

    def test_sites(self, f: int) -> list[str]:
        return sorted(s for s, g in self.folds.items() if g == f)


@dataclass
class CVReport:
    plan: CVPlan
    site_ids: list[str]  # per held-out observation
    periods: np.ndarray
    observed: np.ndarray  # log scale
    predicted: np.ndarray  # log scale
    lta_observed: dict[str, float]
    lta_predicted: dict[str, float]
    metrics: dict
    per_season: dict
    fold_info: list[dict]
    any_failed: bool
    native_scale: bool


def spatial_clusters(coords: np.ndarray, size: int = 6) -> list[list[int]]:
    """Greedy grouping into clusters of up to `size` mutually nearest sites."""
    n = len(coords)
    unused = list(range(n))
    clusters = []
    while unused:
        seed_idx = unused[0]
        d = np.linalg.norm(coords[unused] - coords[seed_idx], axis=1)
        order = np.argsort(d, kind="stable")[:size]
        group = sorted(unused[k] for k in order)
        clusters.append(group)
        unused = [u for u in unused if u not in set(group)]
    return clusters


def make_folds(sites: SiteTable, monitor_class: SiteKind, k: int = 10,
               seed: int = 0, cluster: bool = False) -> CVPlan:
    """Random balanced site partition, deterministic per seed."""
    ids = sites.ids_of_kind(monitor_class)
    if len(ids) < k:
        raise ValueError(f"class {monitor_class.value} has {len(ids)} sites, "
                         f"fewer than {k} folds")
    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    if cluster:
        idx = [sites.index_of(s) for s in ids]
        groups = spatial_clusters(sites.coords[idx])
        order = rng.permutation(len(groups))
        for pos, g in enumerate(order):
            for local in groups[g]:
                folds[ids[local]] = pos % k + 1
    else:
        order = rng.permutation(len(ids))
        for pos, j in enumerate(order):
            folds[ids[j]] = pos % k + 1
    return CVPlan(monitor_class, folds, seed, k)


def rmse(pred, obs) -> float:
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape or pred.size == 0:
        raise ValueError("prediction/observation shape mismatch or empty")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def clamped_r2(pred, obs) -> float:
    """max(0, 1 - RMSE^2 / Var(obs)); population-variance convention."""
    obs = np.asarray(obs, dtype=float)
    if obs.size < 2:
        raise ValueError("need at least 2 values for R^2")
    v = float(np.var(obs))
    if v <= 0:
        raise ValueError("zero observation variance")
    return max(0.0, 1.0 - rmse(pred, obs) ** 2 / v)


def r2_lta(pred_lta, obs_lta) -> float:
    """Clamped R^2 on per-site long-term averages, native scale."""
    return clamped_r2(pred_lta, obs_lta)


def period_reference(obs: ObservationSet, sites: SiteTable,
                     kind: SiteKind = SiteKind.AQS_FIXED) -> dict[int, float]:
    """Per-period spatial mean of the fixed-site log observations."""
    ref_ids = set(sites.ids_of_kind(kind))
    out: dict[int, list[float]] = {}
    for sid, t, v in zip(obs.site_ids, obs.periods, obs.values):
        if sid in ref_ids:
            out.setdefault(int(t), []).append(float(v))
    return {t: float(np.mean(vs)) for t, vs in out.items()}


def detrended_r2(pred, obs, periods, reference: dict[int, float]) -> float:
    """Clamped R^2 with the denominator variance taken after removing the
    per-period reference mean; the RMSE numerator is unchanged."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    missing = sorted(set(int(t) for t in periods) - set(reference))
    if missing:
        raise ValueError(f"no fixed-site reference for periods {missing}")
    ref = np.array([reference[int(t)] for t in periods])
    v = float(np.var(obs - ref))
    if v <= 0:
        raise ValueError("zero detrended variance")
    return max(0.0, 1.0 - rmse(pred, obs) ** 2 / v)


def score_predictions(site_ids, periods, observed, predicted,
                      reference: dict[int, float] | None = None,
                      native: bool = True) -> dict:
    """Two-week, LTA, and detrended scores for one prediction table."""
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    p2, o2 = (np.exp(predicted), np.exp(observed)) if native else (predicted, observed)
    metrics = {
        "rmse_2wk": rmse(p2, o2),
        "r2_2wk": clamped_r2(p2, o2),
    }
    lta_obs, lta_pred = {}, {}
    for sid in sorted(set(site_ids)):
        mask = np.array([s == sid for s in site_ids])
        pers = np.asarray(periods)[mask]
        lta_obs[sid] = long_term_average(observed[mask], pers)
        lta_pred[sid] = long_term_average(predicted[mask], pers)
    if len(lta_obs) >= 2:
        ov = np.array([lta_obs[s] for s in sorted(lta_obs)])
        pv = np.array([lta_pred[s] for s in sorted(lta_obs)])
        metrics["rmse_lta"] = rmse(pv, ov)
        metrics["r2_lta"] = r2_lta(pv, ov)
    if reference is not None:
        metrics["r2_detrended"] = detrended_r2(predicted, observed,
                                               periods, reference)
    return metrics, lta_obs, lta_pred


def cross_validate(spec: ModelSpec, sites: SiteTable, obs: ObservationSet,
                   plan: CVPlan, refit_trends: bool = False,
                   native: bool = True) -> CVReport:
    """Fold-wise refit and out-of-fold prediction at held-out site-periods.

    The temporal basis is estimated once from the full dataset and shared
    across folds unless refit_trends is set, in which case each fold
    re-estimates it from its own training observations.
    """
    shared_tbasis = None
    if not refit_trends:
        shared_tbasis = estimate_temporal_basis(obs, spec.m, spec.smooth_df)

    obs_by_key = {(s, int(t)): float(v)
                  for s, t, v in zip(obs.site_ids, obs.periods, obs.values)}
    all_ids = list(sites.site_ids)
    rec_sids, rec_pers, rec_obs, rec_pred = [], [], [], []
    fold_info = []
    any_failed = False
    season_acc: dict[int, list[tuple[float, float]]] = {}
    det_ref_acc = []  # (pred, obs, period, reference dict per fold)

    for f in range(1, plan.k + 1):
        held = plan.test_sites(f)
        if not held:
            continue
        train_ids = [s for s in all_ids if s not in set(held)]
        train_obs = obs.restrict_sites(train_ids)
        # leakage guard: the training set must contain no held-out site
        leaked = set(train_obs.site_ids) & set(held)
        if leaked:
            raise AssertionError(f"held-out sites leaked into training: {leaked}")
        train_sites = sites.subset(train_ids)
        info = {"fold": f, "n_test_sites": len(held), "failed": False,
                "train_fingerprint": data_fingerprint(train_sites, train_obs)}
        pairs_keys = [(s, int(t)) for s, t in zip(obs.site_ids, obs.periods)
                      if s in set(held)]
        if not pairs_keys:
            info["failed"] = True
            info["error"] = "no held-out observations"
            fold_info.append(info)
            any_failed = True
            continue
        try:
            model = fit(spec, train_sites, train_obs, tbasis=shared_tbasis)
            tsites = sites.subset(held)
            local = {s: i for i, s in enumerate(tsites.site_ids)}
            pairs = [(local[s], t) for s, t in pairs_keys]
            res = predict(model, train_obs,
                          PredictionRequest(tsites, pairs=pairs,
                                            want_variance=False))
        except (FitError, ValueError, FloatingPointError) as exc:
            info["failed"] = True
            info["error"] = str(exc)
            fold_info.append(info)
            any_failed = True
            continue
        info["loglik"] = model.loglik
        info["aic"] = model.aic
        info["params"] = {nm: float(np.exp(v)) for nm, v in
                          zip(model.diagnostics["param_names"],
                              model.diagnostics["opt_x"])}
        fold_info.append(info)
        ref = period_reference(train_obs, train_sites)
        for (s, t), yhat in zip(pairs_keys, res.mean):
            yobs = obs_by_key[(s, t)]
            rec_sids.append(s)
            rec_pers.append(t)
            rec_obs.append(yobs)
            rec_pred.append(float(yhat))
            season_acc.setdefault(t, []).append((float(yhat), yobs))
            if t in ref:
                det_ref_acc.append((float(yhat), yobs, t, ref[t]))

    if not rec_sids:
        raise FitError("all cross-validation folds failed",
                       [i.get("error", "") for i in fold_info])
    if any_failed:
        warnings.warn("some cross-validation folds failed; metrics cover "
                      "successful folds only", stacklevel=2)

    periods_arr = np.array(rec_pers)
    obs_arr = np.array(rec_obs)
    pred_arr = np.array(rec_pred)
    metrics, lta_obs, lta_pred = score_predictions(
        rec_sids, periods_arr, obs_arr, pred_arr, reference=None, native=native)
    if det_ref_acc:
        dp = np.array([a[0] for a in det_ref_acc])
        do = np.array([a[1] for a in det_ref_acc])
        ref_map = {i: a[3] for i, a in enumerate(det_ref_acc)}
        dt = np.arange(len(det_ref_acc))
        try:
            metrics["r2_detrended"] = detrended_r2(dp, do, dt, ref_map)
        except ValueError:
            pass
    per_season = {}
    if plan.monitor_class is SiteKind.SNAPSHOT:
        for t in sorted(season_acc):
            pv = np.array([a[0] for a in season_acc[t]])
            ov = np.array([a[1] for a in season_acc[t]])
            p2, o2 = (np.exp(pv), np.exp(ov)) if native else (pv, ov)
            entry = {"rmse": rmse(p2, o2)}
            if len(ov) >= 2 and np.var(o2) > 0:
                entry["r2"] = clamped_r2(p2, o2)
            per_season[int(t)] = entry

    return CVReport(plan, rec_sids, periods_arr, obs_arr, pred_arr,
                    lta_obs, lta_pred, metrics, per_season, fold_info,
                    any_failed, native)
