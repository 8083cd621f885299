import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrst.covariance import (CovParams, ExpCovParams, chol_logdet, chol_psd,
                             cov_matrix, exp_corr)
from rrst.geometry import pairwise_distances


def test_exp_corr_origin():
    assert exp_corr(0.0, 7.0) == 1.0


def test_exp_corr_one_range_length():
    assert exp_corr(7.0, 7.0) == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_exp_corr_monotone_sweep():
    r = np.linspace(0, 100, 200)
    c = exp_corr(r, 13.0)
    assert np.all(np.diff(c) < 0)
    assert np.all((c > 0) & (c <= 1))


def test_exp_corr_negative_distance_error():
    with pytest.raises(ValueError):
        exp_corr(-1.0, 5.0)


def test_exp_corr_bad_range_error():
    with pytest.raises(ValueError):
        exp_corr(1.0, 0.0)


def test_cov_matrix_pure_nugget_identity():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 10, size=(5, 2))
    d = pairwise_distances(pts, pts)
    c = cov_matrix(d, ExpCovParams(phi=3.0, tau2=0.0, sigma2=1.0))
    assert np.allclose(c, np.eye(5))


def test_cov_matrix_total_sill_diagonal():
    pts = np.array([[0.0, 0], [1, 0]])
    d = pairwise_distances(pts, pts)
    c = cov_matrix(d, ExpCovParams(phi=2.0, tau2=1.5, sigma2=0.25))
    assert c[0, 0] == pytest.approx(1.75)
    assert c[1, 1] == pytest.approx(1.75)


def test_cov_matrix_psd_eigen_oracle():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 30, size=(8, 2))
    d = pairwise_distances(pts, pts)
    c = cov_matrix(d, ExpCovParams(phi=9.0, tau2=2.0, sigma2=0.0))
    assert np.linalg.eigvalsh(c).min() >= -1e-10


def test_cov_matrix_nonsquare_error():
    with pytest.raises(ValueError):
        cov_matrix(np.zeros((2, 3)), ExpCovParams(1.0, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cov_matrix_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 40, size=(6, 2))
    d = pairwise_distances(pts, pts)
    p = rng.permutation(6)
    params = ExpCovParams(phi=rng.uniform(1, 30), tau2=rng.uniform(0.1, 3),
                          sigma2=rng.uniform(0, 1))
    c = cov_matrix(d, params)
    cp = cov_matrix(d[np.ix_(p, p)], params)
    assert np.allclose(c[np.ix_(p, p)], cp)


def test_cov_matrix_distance_scale_invariance():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 20, size=(6, 2))
    d = pairwise_distances(pts, pts)
    a = cov_matrix(d, ExpCovParams(phi=5.0, tau2=1.2, sigma2=0.3))
    b = cov_matrix(3.0 * d, ExpCovParams(phi=15.0, tau2=1.2, sigma2=0.3))
    assert np.allclose(a, b)


def test_cov_matrix_strictly_pd_with_nugget():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 10, size=(7, 2))
    d = pairwise_distances(pts, pts)
    c = cov_matrix(d, ExpCovParams(phi=4.0, tau2=1.0, sigma2=0.1))
    cf, jittered = chol_psd(c)
    assert not jittered
    assert np.isfinite(chol_logdet(cf))


def test_chol_psd_jitter_retry():
    # coincident sites without nugget: rank-deficient, one jitter retry
    d = np.zeros((3, 3))
    c = cov_matrix(d, ExpCovParams(phi=5.0, tau2=1.0, sigma2=0.0))
    cf, jittered = chol_psd(c, jitter_scale=1.0)
    assert jittered


def test_exp_cov_params_invariants():
    with pytest.raises(ValueError):
        ExpCovParams(phi=-1.0, tau2=1.0)
    with pytest.raises(ValueError):
        ExpCovParams(phi=1.0, tau2=-0.5)
    with pytest.raises(ValueError):
        ExpCovParams(phi=1.0, tau2=1.0, sigma2=-0.1)


def test_cov_params_invariants():
    tb = [ExpCovParams(5.0, 1.0), ExpCovParams(5.0, 0.5)]
    tv = ExpCovParams(10.0, 1.0, 0.1)
    p = CovParams(tb, tv, [0.1, 0.2])
    assert p.m == 2 and p.has_nugget
    assert not CovParams(tb, tv, None).has_nugget
    with pytest.raises(ValueError):
        CovParams(tb, tv, [0.1])  # length mismatch
    with pytest.raises(ValueError):
        CovParams(tb, tv, [0.1, -0.2])
