import time
import warnings

import numpy as np
import pytest
from scipy import special, stats

from clusterspearman.cpm import (AsymmetricLinkWarning, BlockSolver, cluster_median_coeffs,
                                 fit_cpm, fit_cpm_dataset, psr_from_cpm, psr_nonparametric)
from clusterspearman.dataset import ClusteredDataset
from clusterspearman.exceptions import ConvergenceError, DataError, SeparationError
from clusterspearman.inference import cpm_score
from clusterspearman.links import LINKS, get_link

from conftest import latent_dataset

CDFS = {
    "probit": stats.norm.cdf,
    "logit": special.expit,
    "cloglog": lambda e: 1.0 - np.exp(-np.exp(e)),
    "loglog": lambda e: np.exp(-np.exp(-e)),
}


def loglik(fit, theta):
    """Multinomial log-likelihood written directly from the cell probabilities."""
    G = CDFS[fit.link.kind]
    m = len(fit.alpha)
    a = np.concatenate([[-np.inf], theta[:m], [np.inf]])
    b = np.concatenate([[0.0], theta[m:]])[fit.cluster_index]
    pi = G(a[fit.codes + 1] - b) - G(a[fit.codes] - b)
    return np.sum(np.log(pi))


def gee_score(fit, theta):
    """Per-cluster GEE form sum_j D_j' V_j^-1 (O_j - mu_j) with cumulative indicators."""
    link = fit.link
    m = len(fit.alpha)
    alpha = theta[:m]
    beta = np.concatenate([[0.0], theta[m:]])
    p = len(theta)
    U = np.zeros((fit.n_clusters, p))
    for j, (c, i) in enumerate(zip(fit.codes, fit.cluster_index)):
        eta = alpha - beta[i]
        mu = link.cdf(eta)
        O = (c <= np.arange(m)).astype(float)
        lo, hi = np.minimum.outer(mu, mu), np.maximum.outer(mu, mu)
        V = lo * (1.0 - hi)
        D = np.zeros((m, p))
        D[np.arange(m), np.arange(m)] = link.pdf(eta)
        if i > 0:
            D[:, m + i - 1] = -link.pdf(eta)
        U[i] += D.T @ np.linalg.solve(V, O - mu)
    return U


@pytest.mark.parametrize("kind", LINKS)
def test_link_identities(kind):
    link = get_link(kind)
    eta = np.linspace(-8, 8, 161)
    # invert on whichever side keeps the tail probability representable
    lower, upper = link.cdf(eta), link.sf(eta)
    use_lower = lower <= upper
    ok = np.where(use_lower, lower, upper) > 1e-300
    lo_ok, up_ok = ok & use_lower, ok & ~use_lower
    np.testing.assert_allclose(link.quantile(lower[lo_ok]), eta[lo_ok], rtol=0, atol=1e-10)
    np.testing.assert_allclose(link.quantile_sf(upper[up_ok]), eta[up_ok], rtol=0, atol=1e-10)
    if link.symmetric:
        assert ok.all()
    np.testing.assert_allclose(link.cdf(eta) + link.sf(eta), 1.0, atol=1e-15)
    np.testing.assert_allclose(link.cdf(eta), CDFS[kind](eta), atol=1e-14)
    h = 1e-6
    np.testing.assert_allclose(link.pdf(eta), (link.cdf(eta + h) - link.cdf(eta - h)) / (2 * h),
                               atol=1e-8)
    np.testing.assert_allclose(link.dpdf(eta), (link.pdf(eta + h) - link.pdf(eta - h)) / (2 * h),
                               atol=1e-8)
    assert link.cdf(np.inf) == 1.0 and link.cdf(-np.inf) == 0.0
    assert link.pdf(np.inf) == 0.0 and link.pdf(-np.inf) == 0.0
    # upper-tail cells keep relative precision
    cell = link.cell(np.array([6.5]), np.array([6.0]))[0]
    exact = link.sf(6.0) - link.sf(6.5)
    assert cell == pytest.approx(exact, rel=1e-12) and cell > 0
    with pytest.raises(ValueError):
        get_link("cauchit")


@pytest.mark.parametrize("kind", LINKS)
def test_saturated_single_cluster(kind):
    values = np.array([1, 1, 2, 3, 3, 3, 5, 8, 8, 9], dtype=float)
    fit = fit_cpm(values, np.zeros(len(values), dtype=int), kind)
    props = np.cumsum(np.unique(values, return_counts=True)[1])[:-1] / len(values)
    np.testing.assert_allclose(fit.link.cdf(fit.alpha), props, atol=1e-8)
    assert fit.beta.size == 0 and fit.converged


def test_saturated_logit_example():
    fit = fit_cpm([1, 1, 2, 3], [0, 0, 0, 0], "logit")
    np.testing.assert_allclose(fit.alpha, [special.logit(0.5), special.logit(0.75)], atol=1e-8)


def test_identical_clusters_have_zero_shift():
    v = [1.0, 2.0, 4.0, 7.0]
    fit = fit_cpm(v + v, [0] * 4 + [1] * 4)
    assert abs(fit.beta[0]) < 1e-6


def test_shift_recovery():
    rng = np.random.default_rng(3)
    z = rng.normal(size=4000)
    cl = np.repeat([0, 1], 2000)
    fit = fit_cpm(np.exp(z + 0.7 * cl), cl, "probit")
    assert fit.beta[0] == pytest.approx(0.7, abs=0.08)


@pytest.mark.parametrize("kind", LINKS)
def test_fit_properties(small_ds, kind):
    fit = fit_cpm_dataset(small_ds, "x", kind)
    assert fit.converged and fit.gradient_norm <= 1e-8
    assert np.all(np.diff(fit.alpha) > 0)
    assert fit.n_categories == len(np.unique(small_ds.x))
    for i in range(fit.n_clusters):
        pi = fit.cell_probabilities(i)
        assert np.all(pi >= 0)
        assert pi.sum() == pytest.approx(1.0, abs=1e-10)
    lls = [ll for _, ll, _, _ in fit.trace]
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))
    assert fit.trace_lines()[0].startswith("iter")


@pytest.mark.parametrize("kind", LINKS)
def test_score_matches_finite_differences(small_ds, kind):
    fit = fit_cpm_dataset(small_ds, "y", kind)
    rng = np.random.default_rng(1)
    for theta in (fit.theta, fit.theta + rng.normal(0, 0.05, fit.n_params)):
        g = np.asarray(cpm_score(fit, theta).sum(axis=0)).ravel()
        fd = np.empty_like(g)
        for j in range(len(theta)):
            h = 1e-6 * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd[j] = (loglik(fit, tp) - loglik(fit, tm)) / (2 * h)
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(g - fd)) / scale < 1e-5


@pytest.mark.parametrize("kind", ["probit", "logit"])
def test_score_equals_gee_form(kind):
    ds = latent_dataset(4, n=5, k=(2, 4), digits=1)
    fit = fit_cpm_dataset(ds, "x", kind)
    theta = fit.theta + np.random.default_rng(0).normal(0, 0.1, fit.n_params)
    U = cpm_score(fit, theta).toarray()
    np.testing.assert_allclose(U, gee_score(fit, theta), atol=1e-8)
    # first-order condition at the fit
    assert np.max(np.abs(cpm_score(fit).toarray().sum(axis=0))) <= 1e-6


def test_bernoulli_score():
    # one cluster, two categories: U = sum (o - mu) / (mu (1 - mu)) dmu/dalpha
    fit = fit_cpm([0.0, 0.0, 1.0, 1.0, 1.0], [0] * 5, "logit")
    a = np.array([0.3])
    mu = special.expit(a[0])
    o = np.array([1, 1, 0, 0, 0])
    expected = np.sum((o - mu) / (mu * (1 - mu)) * mu * (1 - mu))
    assert cpm_score(fit, a).toarray()[0, 0] == pytest.approx(expected, abs=1e-12)


def test_block_solver_matches_dense(medium_ds):
    fit = fit_cpm_dataset(medium_ds, "x")
    diag_a, off_a, diag_b, K = fit._hessian_blocks
    m = len(diag_a)
    P = np.zeros((fit.n_params, fit.n_params))
    P[np.arange(m), np.arange(m)] = diag_a
    P[np.arange(m - 1), np.arange(1, m)] = off_a
    P[np.arange(1, m), np.arange(m - 1)] = off_a
    P[m:, m:] = np.diag(diag_b)
    Kd = K.toarray() if hasattr(K, "toarray") else np.asarray(K)
    P[:m, m:] = Kd
    P[m:, :m] = Kd.T
    r = np.random.default_rng(0).normal(size=fit.n_params)
    np.testing.assert_allclose(fit.solver.solve(r), np.linalg.solve(P, r), rtol=1e-8, atol=1e-10)
    assert isinstance(fit.solver, BlockSolver)


def test_rank_equivariance(small_ds):
    a = fit_cpm_dataset(small_ds, "x")
    b = fit_cpm_dataset(small_ds.replace(x=np.exp(small_ds.x)), "x")
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.psr(), b.psr())


def test_psr_from_cpm(small_ds):
    fit = fit_cpm_dataset(small_ds, "x")
    r = fit.psr()
    assert np.all((r > -1) & (r < 1))
    for j in (0, 5, small_ds.n_obs - 1):
        i = small_ds.cluster_index[j]
        assert psr_from_cpm(fit, small_ds.cluster_ids[i], small_ds.x[j]) == pytest.approx(r[j], abs=1e-15)
    # top support value: F(x) = 1 so r = F(x-)
    top = fit.support[-1]
    cid = small_ds.cluster_ids[2]
    Fm = fit.link.cdf(fit.alpha[-1] - fit.beta_full[2])
    assert psr_from_cpm(fit, cid, top) == pytest.approx(Fm, abs=1e-15)
    with pytest.raises(KeyError):
        psr_from_cpm(fit, "nope", top)
    with pytest.raises(KeyError):
        psr_from_cpm(fit, cid, top + 0.123)


def test_psr_nonparametric_examples():
    ds = ClusteredDataset.from_arrays(["a", "a", "a", "b", "b", "c"], [1, 2, 3, 4, 4, 9], [0] * 6)
    np.testing.assert_allclose(psr_nonparametric(ds, "x"), [-2 / 3, 0, 2 / 3, 0, 0, 0])


def test_psr_nonparametric_sums_to_zero(medium_ds):
    r = psr_nonparametric(medium_ds.replace(x=np.round(medium_ds.x)), "x")
    sums = np.bincount(medium_ds.cluster_index, weights=r)
    np.testing.assert_allclose(sums, 0.0, atol=1e-12)


def test_cluster_median_order():
    rng = np.random.default_rng(8)
    hits = 0
    for _ in range(20):
        cl = np.repeat([0, 1, 2], 30)
        fit = fit_cpm(cl + rng.normal(size=90), cl, "probit")
        c = cluster_median_coeffs(fit)
        hits += c[0] < c[1] < c[2]
        assert c[0] == 0.0
    assert hits >= 18


def test_asymmetric_link_warns(small_ds):
    fit = fit_cpm_dataset(small_ds, "x", "loglog")
    with pytest.warns(AsymmetricLinkWarning):
        cluster_median_coeffs(fit)


def test_separation_reports_cluster():
    with pytest.raises(SeparationError, match="'top'"):
        fit_cpm([1, 3, 5, 2, 4, 6, 10, 11], [0, 0, 0, 1, 1, 1, 2, 2],
                cluster_ids=("a", "b", "top"))


def test_non_convergence_reports_gradient(medium_ds):
    with pytest.raises(ConvergenceError) as info:
        fit_cpm_dataset(medium_ds, "x", max_iter=1)
    assert info.value.gradient_norm > 0
    assert info.value.iterations == 1


def test_needs_two_values():
    with pytest.raises(DataError):
        fit_cpm([1.0, 1.0, 1.0], [0, 1, 1])


def test_large_fit_is_fast():
    # n = 200 clusters of 20 continuous values: about 4000 intercepts
    ds = latent_dataset(99, n=200, k=20, rho_b=0.8, rho_w=0.7)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit = fit_cpm_dataset(ds, "x")
    elapsed = time.perf_counter() - t0
    assert fit.converged and fit.n_categories == 4000
    assert elapsed < 5.0
