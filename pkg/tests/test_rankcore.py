import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from clusterspearman.dataset import ClusteredDataset, compute_weights
from clusterspearman.exceptions import DataError, DegenerateInputError
from clusterspearman.rankcore import (d_correction, mid_ranks, rank_icc, total_spearman,
                                      weighted_corr, weighted_mid_cdf)

from conftest import latent_dataset


def brute_midranks(v):
    v = np.asarray(v, dtype=float)
    return np.array([np.sum(v < a) + (np.sum(v == a) + 1) / 2.0 for a in v])


def brute_spearman(x, y):
    """Pearson correlation of mid-ranks, written out longhand."""
    rx, ry = brute_midranks(x), brute_midranks(y)
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    return sxy / np.sqrt(sxx * syy)


def shih_fay(ds):
    """Ridit correlation with equal cluster weights, by explicit loops."""
    groups_x, groups_y = ds.groups("x"), ds.groups("y")
    n = len(groups_x)

    def ridit(groups, v):
        return sum((np.sum(g < v) + 0.5 * np.sum(g == v)) / len(g) for g in groups) / n

    num = vx = vy = 0.0
    for gx, gy in zip(groups_x, groups_y):
        k = len(gx)
        for a, b in zip(gx, gy):
            fa, fb = ridit(groups_x, a) - 0.5, ridit(groups_y, b) - 0.5
            num += fa * fb / (n * k)
            vx += fa * fa / (n * k)
            vy += fb * fb / (n * k)
    return num / np.sqrt(vx * vy)


def brute_icc(groups, w):
    """Rank ICC and D from explicit pair loops."""
    values = np.concatenate(groups)
    F = np.array([w @ (values < v) + 0.5 * (w @ (values == v)) for v in values])
    e = F - w @ F
    den = w @ (e * e)
    num = dnum = 0.0
    pos = 0
    for g in groups:
        k = len(g)
        idx = np.arange(pos, pos + k)
        pos += k
        wi = w[idx].sum()
        if k < 2:
            continue
        cm = F[idx].mean()
        pairs = [(a, b) for a in idx for b in idx if a < b]
        num += wi * sum(e[a] * e[b] for a, b in pairs) / len(pairs)
        dnum += wi * sum((F[a] - cm) * (F[b] - cm) for a, b in pairs) / len(pairs)
    return num / den, dnum / den


def test_weighted_mid_cdf_steps():
    m = weighted_mid_cdf([3.0, 1.0, 3.0, 2.0], [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(m.support, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(m.cdf, [0.2, 0.6, 1.0])
    np.testing.assert_allclose(m.cdf_left, [0.0, 0.2, 0.6])
    np.testing.assert_allclose(m.midcdf, [0.1, 0.4, 0.8])
    F, Fl, Fs = m([0.5, 2.0, 2.5, 9.0])
    np.testing.assert_allclose(F, [0.0, 0.6, 0.6, 1.0])
    np.testing.assert_allclose(Fl, [0.0, 0.2, 0.6, 1.0])
    np.testing.assert_allclose(Fs, [0.0, 0.4, 0.6, 1.0])


def test_weighted_mid_cdf_rejects_bad_input():
    with pytest.raises(DataError):
        weighted_mid_cdf([])
    with pytest.raises(DataError):
        weighted_mid_cdf([1.0, 2.0], [1.0])


def test_mid_ranks_match_scipy():
    v = np.random.default_rng(0).integers(0, 6, 50)
    np.testing.assert_allclose(mid_ranks(v), stats.rankdata(v))


def test_total_spearman_obs_weights_equals_tied_spearman():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        N = rng.integers(5, 60)
        cl = rng.integers(0, max(2, N // 3), N)
        x = rng.integers(0, rng.integers(2, 8), N).astype(float)
        y = np.round(x + rng.normal(0, 2, N))
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        ds = ClusteredDataset.from_arrays(cl.astype(str), x, y)
        ref = brute_spearman(ds.x, ds.y)
        worst = max(worst, abs(total_spearman(ds, compute_weights(ds, "obs")) - ref))
        assert ref == pytest.approx(stats.spearmanr(ds.x, ds.y)[0], abs=1e-12)
    assert worst <= 1e-12


def test_total_spearman_cluster_weights_equals_shih_fay():
    for seed in range(10):
        ds = latent_dataset(seed, n=8, k=(1, 6), digits=0)
        assert total_spearman(ds) == pytest.approx(shih_fay(ds), abs=1e-10)


def test_weighted_corr_degenerate():
    with pytest.raises(DegenerateInputError):
        weighted_corr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0], np.full(3, 1 / 3))


def test_rank_icc_matches_pair_loops(small_ds):
    for scheme in ("cluster", "obs"):
        w = compute_weights(small_ds, scheme)
        est = rank_icc(small_ds.groups("x"), w)
        gi, d = brute_icc(small_ds.groups("x"), w.weights)
        assert est.gamma_I == pytest.approx(gi, abs=1e-12)
        assert est.D_hat == pytest.approx(d, abs=1e-12)
        assert est.scheme == scheme


def test_d_hat_is_negative_and_singletons_ignored(small_ds):
    est = rank_icc(small_ds.groups("y"))
    assert est.D_hat < 0
    assert d_correction([[1.0], [2.0], [3.0]]) == 0.0
    with pytest.raises(DegenerateInputError):
        rank_icc([[1.0], [2.0]])
    with pytest.raises(DegenerateInputError):
        rank_icc([[1.0, 1.0], [1.0, 1.0]])


def test_rank_icc_large_sample_truth():
    # latent ICC 1/2 on the Pearson scale
    ds = latent_dataset(7, n=2000, k=10)
    assert rank_icc(ds.groups("x")).gamma_I == pytest.approx(6 / np.pi * np.arcsin(0.25), abs=0.02)


def test_rank_icc_accepts_scheme_strings(small_ds):
    a = rank_icc(small_ds.groups("x"), "obs")
    b = rank_icc(small_ds.groups("x"), compute_weights(small_ds, "obs"))
    assert a.gamma_I == pytest.approx(b.gamma_I, abs=1e-14)
    with pytest.raises(DataError):
        rank_icc(small_ds.groups("x"), "bogus")


datasets = st.integers(0, 10_000).map(lambda s: latent_dataset(s, n=10, k=(1, 5), digits=1))
transforms = st.sampled_from([np.exp, np.arctan, lambda v: v ** 3, lambda v: 2.0 * v - 7.0])


@settings(max_examples=30, deadline=None)
@given(datasets, transforms, transforms)
def test_monotone_invariance(ds, fx, fy):
    t = ds.replace(x=fx(ds.x), y=fy(ds.y))
    assert total_spearman(t) == total_spearman(ds)
    assert rank_icc(t.groups("x")).gamma_I == rank_icc(ds.groups("x")).gamma_I


@settings(max_examples=30, deadline=None)
@given(datasets, st.sampled_from(["cluster", "obs"]))
def test_exchange_symmetry_and_range(ds, scheme):
    w = compute_weights(ds, scheme)
    g = total_spearman(ds, w)
    assert g == pytest.approx(total_spearman(ds.swapped(), w), abs=1e-14)
    assert -1.0 <= g <= 1.0
    # decreasing transform flips the sign
    assert total_spearman(ds.replace(y=-ds.y), w) == pytest.approx(-g, abs=1e-12)
