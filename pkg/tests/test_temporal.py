import numpy as np
import pytest

from rrst.temporal import (ObservationSet, TemporalBasis, build_F,
                           default_smooth_df, estimate_temporal_basis,
                           site_trend_fit, smoothing_hat_matrix)

from helpers import random_obs, random_sites, random_trend_basis


def _complete_obs(values, site_ids=None):
    """ObservationSet for a complete T x n matrix of values."""
    T, n = values.shape
    site_ids = site_ids or [f"s{i:03d}" for i in range(n)]
    ids, periods, vals = [], [], []
    for t in range(T):
        for i in range(n):
            ids.append(site_ids[i])
            periods.append(t)
            vals.append(values[t, i])
    return ObservationSet(ids, np.array(periods), np.array(vals))


def test_observation_set_duplicate_record():
    with pytest.raises(ValueError):
        ObservationSet(["a", "a"], np.array([0, 0]), np.array([1.0, 2.0]))


def test_observation_set_counts():
    obs = ObservationSet(["a", "b", "a"], np.array([0, 0, 1]),
                         np.array([1.0, 2.0, 3.0]))
    counts = obs.site_counts()
    assert counts == {0: 2, 1: 1}
    assert sum(counts.values()) == obs.N == 3


def test_observation_set_canonical_order():
    obs = ObservationSet(["b", "a", "a"], np.array([1, 1, 0]),
                         np.array([2.0, 1.0, 0.5]))
    assert obs.site_ids == ["a", "a", "b"]
    assert obs.periods.tolist() == [0, 1, 1]


def test_temporal_basis_requires_constant_first_column():
    with pytest.raises(ValueError):
        TemporalBasis(np.arange(3), np.array([[1.0], [2.0], [1.0]]))


def test_temporal_basis_requires_centered_orthogonal_trends():
    T = 6
    bad = np.column_stack([np.ones(T), np.arange(T, dtype=float)])
    with pytest.raises(ValueError):
        TemporalBasis(np.arange(T), bad)


def test_estimate_m1_constant_column():
    obs = _complete_obs(np.random.default_rng(0).normal(size=(5, 4)))
    tb = estimate_temporal_basis(obs, 1)
    assert tb.m == 1
    assert np.allclose(tb.values, 1.0)


def test_estimate_complete_rank1_matches_svd_oracle():
    rng = np.random.default_rng(1)
    T, n = 30, 8
    u = rng.normal(size=T)
    u -= u.mean()
    u /= np.linalg.norm(u)
    v = rng.normal(size=n)
    data = 2.0 + 5.0 * np.outer(u, v)  # rank-1 centered structure
    obs = _complete_obs(data)
    tb = estimate_temporal_basis(obs, 2, smooth_df=T)
    # dense SVD oracle on the column-centered complete matrix
    C = data - data.mean(axis=0, keepdims=True)
    lead = np.linalg.svd(C)[0][:, 0]
    got = tb.values[:, 1]
    align = np.sign(lead @ got)
    # smoothing at df = T is the identity
    assert np.abs(align * lead - got).max() < 1e-6


def _structured_values(rng, obs):
    """Low-rank trend signal plus small noise, so completion converges."""
    sites = sorted(set(obs.site_ids))
    loading = {s: rng.normal() for s in sites}
    trend = np.sin(2 * np.pi * obs.periods / 12)
    return (np.array([loading[s] for s in obs.site_ids]) * trend
            + 0.05 * rng.normal(size=obs.N))


def test_estimate_site_order_invariance_up_to_sign():
    rng = np.random.default_rng(2)
    sites = random_sites(rng, 6)
    obs = random_obs(rng, sites, 12)
    obs = ObservationSet(obs.site_ids, obs.periods,
                         _structured_values(rng, obs))
    tb1 = estimate_temporal_basis(obs, 2, smooth_df=6)
    renamed = {f"s{i:03d}": f"z{5 - i:03d}" for i in range(6)}
    obs2 = ObservationSet([renamed[s] for s in obs.site_ids], obs.periods.copy(),
                          obs.values.copy())
    tb2 = estimate_temporal_basis(obs2, 2, smooth_df=6)
    col1, col2 = tb1.values[:, 1], tb2.values[:, 1]
    assert min(np.abs(col1 - col2).max(), np.abs(col1 + col2).max()) < 1e-8


def test_estimate_insufficient_coverage_error():
    obs = ObservationSet(["a", "a", "b"], np.array([0, 1, 0]),
                         np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        estimate_temporal_basis(obs, 2)


def test_completion_trace_non_increasing():
    rng = np.random.default_rng(3)
    sites = random_sites(rng, 10)
    obs = random_obs(rng, sites, 20, p_obs=0.5)
    obs = ObservationSet(obs.site_ids, obs.periods,
                         _structured_values(rng, obs))
    tb = estimate_temporal_basis(obs, 2, smooth_df=8)
    trace = np.asarray(tb.completion_trace)
    assert len(trace) >= 1
    assert np.all(np.diff(trace) <= 1e-9 * max(1.0, trace[0]))


def test_build_F_m1_incidence():
    rng = np.random.default_rng(4)
    sites = random_sites(rng, 5)
    obs = random_obs(rng, sites, 4)
    tb = random_trend_basis(rng, 4, 1)
    F = build_F(obs, tb, sites.site_ids).toarray()
    assert set(np.unique(F)) <= {0.0, 1.0}
    assert np.allclose(F.sum(axis=1), 1.0)


def test_build_F_single_site_block():
    T = 6
    tb = random_trend_basis(np.random.default_rng(5), T, 2)
    obs = ObservationSet(["a"] * T, np.arange(T), np.zeros(T))
    F = build_F(obs, tb, ["a"]).toarray()
    assert F.shape == (T, 2)
    assert np.allclose(F[:, 0], 1.0)
    assert np.allclose(F[:, 1], tb.values[:, 1])


def test_build_F_action_matches_loop_oracle():
    rng = np.random.default_rng(6)
    sites = random_sites(rng, 7)
    T, m = 9, 2
    tb = random_trend_basis(rng, T, m)
    obs = random_obs(rng, sites, T)
    F = build_F(obs, tb, sites.site_ids)
    coef = rng.normal(size=(m, sites.n))
    got = F @ coef.reshape(-1)
    pos = {s: k for k, s in enumerate(sites.site_ids)}
    want = np.array([sum(coef[i, pos[s]] * tb.row(t)[i] for i in range(m))
                     for s, t in zip(obs.site_ids, obs.periods)])
    assert np.abs(got - want).max() < 1e-12


def test_build_F_nonzero_count():
    rng = np.random.default_rng(7)
    sites = random_sites(rng, 6)
    tb = random_trend_basis(rng, 5, 2)
    obs = random_obs(rng, sites, 5)
    F = build_F(obs, tb, sites.site_ids)
    assert F.nnz == 2 * obs.N


def test_build_F_unknown_site_error():
    tb = random_trend_basis(np.random.default_rng(8), 3, 1)
    obs = ObservationSet(["ghost"], np.array([0]), np.array([1.0]))
    with pytest.raises(KeyError):
        build_F(obs, tb, ["a", "b"])


def test_site_trend_fit_exact_representation():
    tb = random_trend_basis(np.random.default_rng(9), 10, 2)
    series = 3.0 + 2.0 * tb.values[:, 1]
    coef, fitted = site_trend_fit(np.arange(10), series, tb)
    assert np.abs(coef - [3.0, 2.0]).max() < 1e-10
    assert np.abs(fitted - series).max() < 1e-10


def test_site_trend_fit_constant_series():
    tb = random_trend_basis(np.random.default_rng(10), 8, 2)
    coef, _ = site_trend_fit(np.arange(8), np.full(8, 4.2), tb)
    assert np.abs(coef - [4.2, 0.0]).max() < 1e-10


def test_site_trend_fit_residual_orthogonality():
    rng = np.random.default_rng(11)
    tb = random_trend_basis(rng, 12, 2)
    series = rng.normal(size=12)
    coef, fitted = site_trend_fit(np.arange(12), series, tb)
    resid = series - fitted
    assert np.abs(tb.values.T @ resid).max() < 1e-8


def test_site_trend_fit_too_few_observations():
    tb = random_trend_basis(np.random.default_rng(12), 6, 2)
    with pytest.raises(ValueError):
        site_trend_fit(np.array([0]), np.array([1.0]), tb)


def test_smoothing_hat_matrix_trace_targets_df():
    x = np.arange(20, dtype=float)
    for df in (4.0, 8.0, 12.0):
        hat = smoothing_hat_matrix(x, df)
        assert abs(np.trace(hat) - df) < 1e-4
        # smoother reproduces linear functions exactly (natural spline)
        assert np.abs(hat @ x - x).max() < 1e-6


def test_default_smooth_df_scaling():
    one_year = np.arange(26)  # 26 two-week periods ~ 1 year
    assert default_smooth_df(one_year) == 8
    two_years = np.arange(52)
    assert default_smooth_df(two_years) == 16
