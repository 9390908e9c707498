import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterspearman.analysis import analyze
from clusterspearman.cpm import fit_cpm_dataset
from clusterspearman.dataset import ClusteredDataset, compute_weights
from clusterspearman.exceptions import (DegenerateInputError, InferenceUnsupportedError,
                                        NumericalError)
from clusterspearman.inference import (Z95, between_system, cluster_bootstrap, corr_from_moments,
                                       corr_gradient, cpm_score, gamma_t_influence,
                                       sandwich_gamma_b, sandwich_gamma_w, var_gamma_t,
                                       wald_interval, within_system, z_quantile)
from clusterspearman.rankcore import total_spearman

from conftest import latent_dataset


@pytest.fixture(scope="module")
def tiny():
    # small enough for a dense finite-difference bread matrix
    ds = latent_dataset(1, n=6, k=4, rho_b=0.5, rho_w=0.3, digits=1)
    return ds, fit_cpm_dataset(ds, "x"), fit_cpm_dataset(ds, "y")


@pytest.fixture(scope="module")
def fitted(medium_ds_module):
    ds = medium_ds_module
    return ds, fit_cpm_dataset(ds, "x"), fit_cpm_dataset(ds, "y")


@pytest.fixture(scope="module")
def medium_ds_module():
    return latent_dataset(5, n=60, k=(3, 8), rho_b=0.6, rho_w=0.4)


def test_z_quantile_and_wald():
    assert z_quantile(0.95) == Z95
    assert z_quantile(0.9) == pytest.approx(1.6448536, abs=1e-7)
    with pytest.raises(ValueError):
        z_quantile(1.0)
    assert wald_interval(0.95, 0.1) == (pytest.approx(0.95 - Z95 * 0.1), 1.0)
    lo, hi = wald_interval(0.95, 0.1, fisher_z=True)
    assert -1 < lo < 0.95 < hi < 1


def test_cpm_score_vanishes_at_fit(fitted):
    _, fx, fy = fitted
    for fit in (fx, fy):
        U = cpm_score(fit)
        assert U.shape == (fit.n_clusters, fit.n_params)
        assert np.max(np.abs(np.asarray(U.sum(axis=0)))) <= 1e-6
        per_obs = cpm_score(fit, per_observation=True)
        np.testing.assert_allclose(np.asarray(per_obs.sum(axis=0)), np.asarray(U.sum(axis=0)),
                                   atol=1e-12)


@pytest.mark.parametrize("builder", [within_system, between_system])
def test_estimating_equation_residual(fitted, builder):
    ds, fx, fy = fitted
    assert builder(ds, fx, fy).residual() <= 1e-6


@pytest.mark.parametrize("builder", [within_system, between_system])
def test_structured_sandwich_matches_dense(tiny, builder):
    ds, fx, fy = tiny
    s = builder(ds, fx, fy)
    n = ds.n_clusters
    A = s.dense_bread(1e-5)
    psi = s.psi()
    Ai = np.linalg.inv(A)
    V = Ai @ (psi.T @ psi / n) @ Ai.T / n
    sl = s.moment_slice
    ref = V[sl, sl]
    assert np.max(np.abs(ref - s.covariance())) <= 1e-5 * np.max(np.abs(ref))


@pytest.mark.parametrize("builder", [within_system, between_system])
def test_cross_jacobian_matches_finite_differences(tiny, builder):
    ds, fx, fy = tiny
    s = builder(ds, fx, fy)
    for axis, fit in (("x", fx), ("y", fy)):
        J = s.cross_jacobian(axis)
        Jn = np.zeros_like(J)
        for j in range(fit.n_params):
            tp, tm = fit.theta.copy(), fit.theta.copy()
            tp[j] += 1e-6
            tm[j] -= 1e-6
            key = "theta_x" if axis == "x" else "theta_y"
            Jn[:, j] = (s.psi_moments(**{key: tp}).sum(0)
                        - s.psi_moments(**{key: tm}).sum(0)) / 2e-6
        assert np.max(np.abs(J - Jn)) <= 1e-6 * max(1.0, np.max(np.abs(J)))


def test_covariance_symmetric_psd(fitted):
    ds, fx, fy = fitted
    for builder in (within_system, between_system):
        V = builder(ds, fx, fy).covariance()
        np.testing.assert_array_equal(V, V.T)
        assert np.min(np.linalg.eigvalsh(V)) >= -1e-12 * np.max(np.abs(V))


def _moments(draw):
    t1, t2 = draw[0], draw[1]
    return np.array([t1, t2, t1 * t2 + draw[2], t1 * t1 + draw[3], t2 * t2 + draw[4]])


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.05, 0.05),
                 st.floats(0.1, 1.0), st.floats(0.1, 1.0)))
def test_corr_gradient_matches_finite_differences(draw):
    t = _moments(draw)
    g = corr_gradient(t)
    num = np.empty(5)
    for j in range(5):
        h = 1e-6
        tp, tm = t.copy(), t.copy()
        tp[j] += h
        tm[j] -= h
        num[j] = (corr_from_moments(tp) - corr_from_moments(tm)) / (2 * h)
    assert np.max(np.abs(g - num)) < 1e-6


def test_sandwich_intervals(fitted):
    ds, fx, fy = fitted
    se, (lo, hi) = sandwich_gamma_w(ds, fx, fy)
    value = within_system(ds, fx, fy).correlation()
    assert se > 0 and lo < value < hi
    assert hi - lo == pytest.approx(2 * Z95 * se)
    se_b, (lo_b, hi_b) = sandwich_gamma_b(ds, fx, fy, value=0.3)
    assert lo_b <= 0.3 <= hi_b and se_b > 0
    _, (zl, zh) = sandwich_gamma_w(ds, fx, fy, fisher_z=True)
    assert np.tanh(0.5 * (np.arctanh(zl) + np.arctanh(zh))) == pytest.approx(value)
    obs = compute_weights(ds, "obs")
    with pytest.raises(InferenceUnsupportedError):
        sandwich_gamma_w(ds, fx, fy, obs)
    with pytest.raises(InferenceUnsupportedError):
        sandwich_gamma_b(ds, fx, fy, obs)


def test_gamma_t_influence_is_gateaux_derivative():
    ds = latent_dataset(2, n=40, k=5, digits=1)
    w = compute_weights(ds, "cluster")
    infl = gamma_t_influence(ds, w)
    assert w.cluster_weights @ infl == pytest.approx(0.0, abs=1e-12)
    eps = 1e-6
    for i in (0, 7, 23):
        m = ds.cluster_index == i

        def g(e):
            ww = (1 - e) * w.weights
            ww[m] += e * w.weights[m] / w.cluster_weights[i]
            return total_spearman(ds, ww)

        assert (g(eps) - g(-eps)) / (2 * eps) == pytest.approx(infl[i], abs=1e-6)


def test_influence_se_agrees_with_bootstrap():
    ds = latent_dataset(3, n=100, k=5)
    se_if, _ = var_gamma_t(ds, method="influence")
    se_boot, _ = var_gamma_t(ds, method="resample", B=1000)
    assert 0.85 <= se_if / se_boot <= 1.15
    with pytest.raises(ValueError):
        var_gamma_t(ds, method="jackknife")


@pytest.fixture(scope="module")
def boot_ds():
    return latent_dataset(4, n=15, k=4, digits=1)


def test_bootstrap_deterministic_across_workers(boot_ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        a = cluster_bootstrap(boot_ds, ["gamma_t", "gamma_w"], B=16, seed=9, n_jobs=1)
        b = cluster_bootstrap(boot_ds, ["gamma_t", "gamma_w"], B=16, seed=9, n_jobs=2)
        c = cluster_bootstrap(boot_ds, "gamma_t", B=16, seed=10)
    for tag in a:
        np.testing.assert_array_equal(a[tag].replicates, b[tag].replicates)
        assert a[tag].se == b[tag].se and a[tag].ci == b[tag].ci
    # a different seed gives different resamples
    assert not np.array_equal(c.replicates, a["gamma_t"].replicates)


def test_bootstrap_shared_resamples(boot_ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        a = cluster_bootstrap(boot_ds, ["gamma_t", "gamma_w"], B=16, seed=9)
        b = cluster_bootstrap(boot_ds, "gamma_t", B=16, seed=9)
    np.testing.assert_array_equal(a["gamma_t"].replicates, b.replicates)


def test_bootstrap_guards(boot_ds):
    with pytest.warns(UserWarning, match="small"):
        r = cluster_bootstrap(boot_ds, "gamma_t", B=50)
    assert r.ci[0] <= r.ci[1] and r.n_failed == 0
    with pytest.raises(DegenerateInputError):
        cluster_bootstrap(boot_ds.take_clusters([0, 1]), "gamma_t", B=200)
    with pytest.raises(ValueError):
        cluster_bootstrap(boot_ds, "gamma_q", B=200)


def test_bootstrap_failure_census():
    # x varies only in the first cluster, so resamples missing it are degenerate
    ds = ClusteredDataset.from_arrays(list("aaabbbccc"), [1, 2, 3, 0, 0, 0, 0, 0, 0],
                                      [1, 2, 3, 4, 5, 6, 7, 8, 9])
    with pytest.raises(NumericalError, match="DegenerateInputError"):
        cluster_bootstrap(ds, "gamma_t", B=200)
    r = cluster_bootstrap(ds, "gamma_t", B=200, max_fail=1.0)
    assert r.failures["DegenerateInputError"] == r.n_failed > 0
    assert len(r.replicates) == 200 - r.n_failed


def test_bootstrap_custom_weights(boot_ds):
    raw = np.linspace(1.0, 2.0, boot_ds.n_obs)
    w = compute_weights(boot_ds, "custom", raw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        r = cluster_bootstrap(boot_ds, "gamma_t", B=30, w=w)
    assert np.all(np.abs(r.replicates) <= 1)


# ---------------------------------------------------------------------------
# analysis routing


def test_analyze_analytic_routes(fitted):
    ds = fitted[0]
    res = analyze(ds, boot_reps=200)
    assert res["gamma_t"].ci_method == "influence"
    assert res["gamma_w"].ci_method == "sandwich"
    assert res["gamma_b_median"].ci_method == "sandwich"
    assert res["gamma_b_median"].se == res["gamma_b_approx"].se
    assert res["naive_between"].ci_method == "bootstrap"
    for tag, e in res.estimates.items():
        assert e.ci[0] <= e.value <= e.ci[1], tag
    names = {r["estimator"] for r in res.records()}
    assert {"rank_icc_x", "rank_icc_y", "d_x", "d_y"} <= names


def test_analyze_obs_weights_and_nonparametric_go_to_bootstrap(boot_ds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        res = analyze(boot_ds, estimators=["gamma_t", "gamma_w"], weights="obs", boot_reps=20)
        np_res = analyze(boot_ds, estimators=["gamma_w"], psr="nonparametric", boot_reps=20)
    assert res["gamma_w"].ci_method == "bootstrap"
    assert any("equal-cluster" in n for n in res.notes)
    assert np_res["gamma_w"].ci_method == "bootstrap"
    bare = analyze(boot_ds, estimators=["gamma_w", "naive_between"], psr="nonparametric",
                   fallback=False)
    assert bare["gamma_w"].ci is None and bare["naive_between"].ci is None
    none = analyze(boot_ds, ci="none")
    assert all(e.ci is None for e in none.estimates.values())
    with pytest.raises(ValueError):
        analyze(boot_ds, ci="exact")
