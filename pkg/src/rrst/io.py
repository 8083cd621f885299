"""Delimited file formats for sites, observations, predictions, and bases.

All writers emit a canonical form (shortest round-trip float repr, sorted
canonical row order), so write -> read -> write is byte-identical.
Observation dates are ISO-8601; periods are consecutive 14-day bins
anchored at the dataset's minimum date.
"""

from __future__ import annotations

import csv
import json
from datetime import date, timedelta

import numpy as np

from .covariance import CovParams, ExpCovParams
from .geometry import SiteKind, SiteTable
from .temporal import PERIOD_DAYS, ObservationSet

_RESERVED = ["site_id", "x_km", "y_km", "kind"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_sites(sites: SiteTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_RESERVED + list(sites.covariate_names))
        for i, sid in enumerate(sites.site_ids):
            row = [sid, _fmt(sites.coords[i, 0]), _fmt(sites.coords[i, 1]),
                   sites.kinds[i].value]
            row += [_fmt(v) for v in sites.covariates[i]]
            w.writerow(row)


def read_sites(path) -> SiteTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty site file {path}")
    header = rows[0]
    if header[:4] != _RESERVED:
        raise ValueError(f"site file {path} must start with columns "
                         f"{','.join(_RESERVED)}")
    cov_names = header[4:]
    ids, coords, kinds, covs = [], [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{ln}: expected {len(header)} fields")
        ids.append(row[0])
        coords.append([float(row[1]), float(row[2])])
        try:
            kinds.append(SiteKind(row[3]))
        except ValueError:
            raise ValueError(f"{path}:{ln}: unknown site kind {row[3]!r}") from None
        covs.append([float(v) for v in row[4:]])
    return SiteTable(ids, np.asarray(coords),
                     kinds, np.asarray(covs).reshape(len(ids), len(cov_names)),
                     cov_names)


def period_start(anchor: date, t: int) -> date:
    return anchor + timedelta(days=PERIOD_DAYS * int(t))


def write_observations(obs: ObservationSet, path) -> None:
    if obs.anchor is None:
        raise ValueError("observation set has no anchor date")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "period_start_date", "log_value"])
        for sid, t, v in zip(obs.site_ids, obs.periods, obs.values):
            w.writerow([sid, period_start(obs.anchor, t).isoformat(), _fmt(v)])


def read_observations(path) -> ObservationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["site_id", "period_start_date", "log_value"]:
        raise ValueError(f"observation file {path} must have header "
                         "site_id,period_start_date,log_value")
    ids, dates, vals = [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValueError(f"{path}:{ln}: expected 3 fields")
        ids.append(row[0])
        try:
            dates.append(date.fromisoformat(row[1]))
        except ValueError:
            raise ValueError(f"{path}:{ln}: bad ISO date {row[1]!r}") from None
        vals.append(float(row[2]))
    if not ids:
        raise ValueError(f"observation file {path} has no data rows")
    anchor = min(dates)
    periods = np.array([(d - anchor).days // PERIOD_DAYS for d in dates])
    return ObservationSet(ids, periods, np.asarray(vals), anchor)


def write_predictions(result, anchor: date, path) -> None:
    """`site_id,period_start_date,pred_log,pred_var` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "period_start_date", "pred_log", "pred_var"])
        var = result.variance
        for k, (sid, t) in enumerate(zip(result.site_ids, result.periods)):
            row = [sid, period_start(anchor, t).isoformat(), _fmt(result.mean[k]),
                   _fmt(var[k]) if var is not None else ""]
            w.writerow(row)


def write_lta(lta: dict[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "lta_native"])
        for sid in sorted(lta):
            w.writerow([sid, _fmt(lta[sid])])


def write_basis(sites: SiteTable, bases, path) -> None:
    """Per-site basis design: unpenalized then penalized columns per trend."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["site_id"]
        for j, b in enumerate(bases, start=1):
            header += [f"f{j}:unpen{q}" for q in range(b.unpenalized.shape[1])]
            header += [f"f{j}:pen{q}" for q in range(b.penalized.shape[1])]
        w.writerow(header)
        for i, sid in enumerate(sites.site_ids):
            row = [sid]
            for b in bases:
                row += [_fmt(v) for v in b.unpenalized[i]]
                row += [_fmt(v) for v in b.penalized[i]]
            w.writerow(row)


def truth_to_dict(layout) -> dict:
    p = layout.params
    return {
        "generator": layout.generator,
        "seed": layout.seed,
        "alpha": [float(a) for a in layout.alpha],
        "params": {
            "theta_B": [{"phi": t.phi, "tau2": t.tau2} for t in p.theta_B],
            "theta_P": p.theta_P,
            "theta_V": {"phi": p.theta_V.phi, "tau2": p.theta_V.tau2,
                        "sigma2": p.theta_V.sigma2},
        },
    }


def write_truth(layout, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth_to_dict(layout), fh, indent=1, sort_keys=True)


def read_truth(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    pd_ = d["params"]
    d["cov_params"] = CovParams(
        [ExpCovParams(t["phi"], t["tau2"]) for t in pd_["theta_B"]],
        ExpCovParams(**pd_["theta_V"]), pd_["theta_P"])
    return d
