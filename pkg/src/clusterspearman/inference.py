"""
Standard errors and confidence intervals.

Two stacked M-estimation systems give analytic (sandwich) standard errors:

* the within system stacks the CPM scores of X and Y with the five cluster
  averaged PSR moments behind the within-cluster correlation;
* the between system stacks the same scores with the first two moments of
  the fitted cluster coefficients and five moments of their normal-CDF
  transforms.

Both are solved blockwise.  The CPM blocks of the bread matrix are the
negative Hessians already factorised by the fits, so the influence of
cluster i on the moment parameters is

    phi_i = E^{-1} (psi_m,i + J_X P_X^{-1} U_X,i + J_Y P_Y^{-1} U_Y,i)

with ``J`` the summed derivative of the moment functions with respect to
the CPM parameters and ``E`` the averaged negative Jacobian in the moment
parameters.  The covariance is ``sum_i phi_i phi_i^T / n^2``.

The total correlation gets either a cluster bootstrap or an influence
function variance that treats it as a smooth functional of the two
weighted marginal distributions.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse, special

from .cpm import CpmFit, _terms
from .dataset import ClusteredDataset, WeightScheme, WeightVector, compute_weights
from .estimators import ESTIMATORS, point_estimates
from .exceptions import (DataError, DegenerateInputError, InferenceUnsupportedError,
                         InstabilityError, NumericalError)
from .rankcore import _midcdf_at_data, total_spearman

__all__ = [
    "Z95",
    "z_quantile",
    "wald_interval",
    "cpm_score",
    "psr_jacobian",
    "EstimatingSystem",
    "within_system",
    "between_system",
    "corr_from_moments",
    "corr_gradient",
    "sandwich_gamma_w",
    "sandwich_gamma_b",
    "BootstrapResult",
    "cluster_bootstrap",
    "gamma_t_influence",
    "var_gamma_t",
]

Z95 = 1.959964
MU_CLAMP = 1e-12


def z_quantile(level: float) -> float:
    """Two-sided standard normal quantile for a confidence ``level``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if abs(level - 0.95) < 1e-12:
        return Z95
    return float(special.ndtri(0.5 + level / 2.0))


def wald_interval(value: float, se: float, level: float = 0.95, fisher_z: bool = False):
    """Wald interval truncated to [-1, 1] (optionally on the Fisher-z scale)."""
    z = z_quantile(level)
    if fisher_z and abs(value) < 1.0:
        centre = np.arctanh(value)
        half = z * se / (1.0 - value * value)
        return float(np.tanh(centre - half)), float(np.tanh(centre + half))
    return float(max(-1.0, value - z * se)), float(min(1.0, value + z * se))


# ---------------------------------------------------------------------------
# CPM scores and PSR derivatives


def _params(fit: CpmFit, theta=None):
    if theta is None:
        return fit.alpha, fit.beta_full
    theta = np.asarray(theta, dtype=float)
    m = len(fit.alpha)
    return theta[:m], np.concatenate([[0.0], theta[m:]])


def _obs_matrix(fit: CpmFit, up, lo, beta):
    """Sparse N x p matrix with per-observation entries in alpha_c, alpha_{c-1}, beta_i."""
    codes, cidx = fit.codes, fit.cluster_index
    m = len(fit.alpha)
    N = len(codes)
    rows = np.arange(N)
    has_up = codes < m
    has_lo = codes > 0
    has_b = cidx > 0
    r = np.concatenate([rows[has_up], rows[has_lo], rows[has_b]])
    c = np.concatenate([codes[has_up], codes[has_lo] - 1, m + cidx[has_b] - 1])
    v = np.concatenate([up[has_up], lo[has_lo], beta[has_b]])
    return sparse.csr_matrix((v, (r, c)), shape=(N, fit.n_params))


def _cluster_sum(fit: CpmFit, obs) -> sparse.csr_matrix:
    N = len(fit.codes)
    agg = sparse.csr_matrix((np.ones(N), (fit.cluster_index, np.arange(N))),
                            shape=(fit.n_clusters, N))
    return agg @ obs


def cpm_score(fit: CpmFit, theta=None, *, per_observation: bool = False,
              return_clamped: bool = False):
    """Per-cluster score vectors ``U_i`` of a CPM.

    Parameters
    ----------
    fit : CpmFit
        Supplies the data layout and, unless ``theta`` is given, the
        parameter value.
    theta : ndarray, optional
        ``(alpha, beta[1:])`` at which to evaluate the scores.
    per_observation : bool
        Return the N x p observation-level scores instead.
    return_clamped : bool
        Also return how many cell probabilities were clamped away from 0.

    Returns
    -------
    scores : sparse matrix, shape (n, p) or (N, p)
        Rows sum to the log-likelihood gradient.
    """
    alpha, bfull = _params(fit, theta)
    t = _terms(fit.link, alpha, bfull, fit.codes, fit.cluster_index)
    clamped = int(np.sum(t.pi < MU_CLAMP))
    pi = np.maximum(t.pi, MU_CLAMP)
    su = t.g_u / pi
    sl = t.g_l / pi
    obs = _obs_matrix(fit, su, -sl, -(su - sl))
    out = obs if per_observation else _cluster_sum(fit, obs)
    return (out, clamped) if return_clamped else out


def psr_jacobian(fit: CpmFit, theta=None) -> sparse.csr_matrix:
    """Sparse N x p derivative of every fitted PSR in the CPM parameters."""
    alpha, bfull = _params(fit, theta)
    t = _terms(fit.link, alpha, bfull, fit.codes, fit.cluster_index)
    return _obs_matrix(fit, t.g_u, t.g_l, -(t.g_u + t.g_l))


def _psr_at(fit: CpmFit, theta=None) -> np.ndarray:
    alpha, bfull = _params(fit, theta)
    t = _terms(fit.link, alpha, bfull, fit.codes, fit.cluster_index)
    return fit.link.cdf(t.upper) + fit.link.cdf(t.lower) - 1.0


# ---------------------------------------------------------------------------
# correlation from moments and its gradient


def corr_from_moments(t) -> float:
    """``(t3 - t1 t2) / sqrt((t4 - t1^2)(t5 - t2^2))``."""
    t1, t2, t3, t4, t5 = t
    a = t4 - t1 * t1
    b = t5 - t2 * t2
    if a <= 0 or b <= 0:
        raise InstabilityError("non-positive variance in the moment parameters")
    return float((t3 - t1 * t2) / np.sqrt(a * b))


def corr_gradient(t) -> np.ndarray:
    """Gradient of :func:`corr_from_moments`."""
    t1, t2, t3, t4, t5 = t
    a = t4 - t1 * t1
    b = t5 - t2 * t2
    s = np.sqrt(a * b)
    h = (t3 - t1 * t2) / s
    return np.array([
        -t2 / s + h * t1 / a,
        -t1 / s + h * t2 / b,
        1.0 / s,
        -h / (2.0 * a),
        -h / (2.0 * b),
    ])


# ---------------------------------------------------------------------------
# stacked estimating systems


@dataclass
class EstimatingSystem:
    """A stacked estimating-equation system solved at its root.

    Attributes
    ----------
    kind : {"within", "between"}
    fit_x, fit_y : CpmFit
    moments : ndarray
        Fitted moment parameters (5 for "within"; 9 for "between", ordered
        ``mu_X, mu_Y, M_X, M_Y, t1..t5``).
    cluster_scale : ndarray
        ``n w_i.``; 1 for every cluster under equal-cluster weights.
    within_weights : ndarray
        ``w_ij / w_i.`` per observation.
    """

    kind: str
    fit_x: CpmFit
    fit_y: CpmFit
    moments: np.ndarray
    cluster_scale: np.ndarray
    within_weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_clusters(self) -> int:
        return self.fit_x.n_clusters

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.fit_x.theta, self.fit_y.theta, self.moments])

    @property
    def moment_slice(self) -> slice:
        p = self.fit_x.n_params + self.fit_y.n_params
        return slice(p, p + len(self.moments))

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        px, py = self.fit_x.n_params, self.fit_y.n_params
        return theta[:px], theta[px:px + py], theta[px + py:]

    # -- moment functions -------------------------------------------------
    def _within_moments(self, theta_x, theta_y, eta):
        xr = _psr_at(self.fit_x, theta_x)
        yr = _psr_at(self.fit_y, theta_y)
        f = np.column_stack([xr, yr, xr * yr, xr * xr, yr * yr])
        ww = self.within_weights[:, None]
        cidx = self.fit_x.cluster_index
        m = np.vstack([np.bincount(cidx, weights=ww[:, 0] * f[:, j], minlength=self.n_clusters)
                       for j in range(5)]).T
        return self.cluster_scale[:, None] * (m - eta[None, :])

    def _between_moments(self, theta_x, theta_y, eta):
        bx = _params(self.fit_x, theta_x)[1]
        by = _params(self.fit_y, theta_y)[1]
        return _between_psi(bx, by, eta, self.cluster_scale)

    def psi_moments(self, theta_x=None, theta_y=None, eta=None) -> np.ndarray:
        """Per-cluster moment estimating functions, shape (n, q)."""
        theta_x = self.fit_x.theta if theta_x is None else theta_x
        theta_y = self.fit_y.theta if theta_y is None else theta_y
        eta = self.moments if eta is None else np.asarray(eta, dtype=float)
        if self.kind == "within":
            return self._within_moments(theta_x, theta_y, eta)
        return self._between_moments(theta_x, theta_y, eta)

    def psi(self, theta=None) -> np.ndarray:
        """Per-cluster stacked estimating functions, shape (n, p_X + p_Y + q)."""
        if theta is None:
            theta = self.theta
        tx, ty, eta = self.split(theta)
        ux = cpm_score(self.fit_x, tx).toarray()
        uy = cpm_score(self.fit_y, ty).toarray()
        return np.hstack([ux, uy, self.psi_moments(tx, ty, eta)])

    def residual(self) -> float:
        """Max-norm of the cluster-summed estimating functions at the fit."""
        return float(np.max(np.abs(self.psi().sum(axis=0))))

    # -- derivative blocks ------------------------------------------------
    def cross_jacobian(self, axis: str) -> np.ndarray:
        """``J = sum_i d psi_m,i / d theta_axis`` (q x p), analytic."""
        fit = self.fit_x if axis == "x" else self.fit_y
        if self.kind == "within":
            xr = _psr_at(self.fit_x)
            yr = _psr_at(self.fit_y)
            own, other = (xr, yr) if axis == "x" else (yr, xr)
            D = psr_jacobian(fit)
            c = self.cluster_scale[fit.cluster_index] * self.within_weights
            coef = np.zeros((len(c), 5))
            j_first, j_sq = (0, 3) if axis == "x" else (1, 4)
            coef[:, j_first] = c
            coef[:, 2] = c * other
            coef[:, j_sq] = 2.0 * c * own
            return np.asarray((D.T @ coef).T)
        b = fit.beta_full
        q = len(self.moments)
        J = np.zeros((q, fit.n_params))
        d = _between_dpsi_dbeta(self.fit_x.beta_full, self.fit_y.beta_full, self.moments,
                                self.cluster_scale, axis)
        m = len(fit.alpha)
        J[:, m:] = d[:, 1:len(b)]
        return J

    def moment_jacobian(self, step: float = 1e-6) -> np.ndarray:
        """``E = -(1/n) sum_i d psi_m,i / d eta`` (q x q)."""
        if self.kind == "within":
            return np.diag(np.full(len(self.moments), self.cluster_scale.mean()))
        eta = self.moments
        q = len(eta)
        E = np.empty((q, q))
        for j in range(q):
            h = step * max(1.0, abs(eta[j]))
            ep, em = eta.copy(), eta.copy()
            ep[j] += h
            em[j] -= h
            E[:, j] = -(self.psi_moments(eta=ep).sum(0) - self.psi_moments(eta=em).sum(0)) / (2 * h)
        return E / self.n_clusters

    # -- sandwich ---------------------------------------------------------
    def influence(self) -> np.ndarray:
        """Per-cluster influence ``phi_i`` of the moment parameters (n x q)."""
        if "phi" in self._cache:
            return self._cache["phi"]
        E = self.moment_jacobian()
        cond = np.linalg.cond(E)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError(f"moment block of A is singular (condition number {cond:.3g})")
        total = self.psi_moments()
        for axis, fit in (("x", self.fit_x), ("y", self.fit_y)):
            R = fit.solver.solve(self.cross_jacobian(axis).T)
            total = total + np.asarray(cpm_score(fit) @ R)
        phi = linalg.solve(E, total.T).T
        self._cache["phi"] = phi
        return phi

    def covariance(self) -> np.ndarray:
        """Sandwich covariance ``A^-1 B A^-T / n`` of the moment parameters."""
        phi = self.influence()
        n = self.n_clusters
        V = phi.T @ phi / n ** 2
        return 0.5 * (V + V.T)

    def correlation(self) -> float:
        return corr_from_moments(self.moments[-5:])

    def correlation_se(self) -> float:
        grad = corr_gradient(self.moments[-5:])
        V = self.covariance()[-5:, -5:]
        var = float(grad @ V @ grad)
        return float(np.sqrt(max(var, 0.0)))

    def dense_bread(self, step: float = 1e-6) -> np.ndarray:
        """Full ``A = -(1/n) d sum psi / d theta`` by finite differences (small problems only)."""
        theta = self.theta
        A = np.empty((len(theta), len(theta)))
        for j in range(len(theta)):
            h = step * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            A[:, j] = -(self.psi(tp).sum(0) - self.psi(tm).sum(0)) / (2 * h)
        return A / self.n_clusters


def _between_F(b, mu, M):
    var = M - mu * mu
    if not var > 0:
        raise InstabilityError(f"fitted variance of the cluster coefficients is {var:.3g}")
    sd = np.sqrt(var)
    z = (b - mu) / sd
    return special.ndtr(z), np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * sd)


def _between_psi(bx, by, eta, scale):
    mux, muy, Mx, My = eta[:4]
    t = eta[4:]
    Fx = _between_F(bx, mux, Mx)[0]
    Fy = _between_F(by, muy, My)[0]
    f = np.column_stack([bx - mux, by - muy, bx * bx - Mx, by * by - My,
                         Fx - t[0], Fy - t[1], Fx * Fy - t[2], Fx * Fx - t[3], Fy * Fy - t[4]])
    return scale[:, None] * f


def _between_dpsi_dbeta(bx, by, eta, scale, axis):
    """Derivative of psi_m,i in cluster i's own coefficient (q x n)."""
    mux, muy, Mx, My = eta[:4]
    Fx, fx = _between_F(bx, mux, Mx)
    Fy, fy = _between_F(by, muy, My)
    d = np.zeros((9, len(bx)))
    if axis == "x":
        d[0] = 1.0
        d[2] = 2.0 * bx
        d[4] = fx
        d[6] = fx * Fy
        d[7] = 2.0 * Fx * fx
    else:
        d[1] = 1.0
        d[3] = 2.0 * by
        d[5] = fy
        d[6] = Fx * fy
        d[8] = 2.0 * Fy * fy
    return d * scale[None, :]


def _require_equal_cluster(w, what):
    scheme = w.scheme if isinstance(w, WeightVector) else WeightScheme(w or "cluster")
    if scheme is not WeightScheme.EQUAL_CLUSTER:
        raise InferenceUnsupportedError(
            f"analytic {what} inference requires equal-cluster weights; "
            "use cluster_bootstrap instead")


def _check_fits(ds, fit_x, fit_y):
    for fit in (fit_x, fit_y):
        if not fit.converged:
            raise NumericalError("sandwich inference needs converged CPM fits")
        if tuple(fit.cluster_ids) != tuple(ds.cluster_ids):
            raise DataError("CPM fit and dataset have different clusters")


def _cluster_layout(ds: ClusteredDataset, w: WeightVector):
    scale = ds.n_clusters * w.cluster_weights
    within = w.weights / w.cluster_weights[ds.cluster_index]
    return scale, within


def within_system(ds: ClusteredDataset, fit_x: CpmFit, fit_y: CpmFit, w=None) -> EstimatingSystem:
    """The stacked system behind the within-cluster correlation."""
    _check_fits(ds, fit_x, fit_y)
    w = compute_weights(ds, "cluster") if w is None else w
    scale, within = _cluster_layout(ds, w)
    xr, yr = fit_x.psr(), fit_y.psr()
    f = np.column_stack([xr, yr, xr * yr, xr * xr, yr * yr])
    moments = w.weights @ f
    return EstimatingSystem("within", fit_x, fit_y, moments, scale, within)


def between_system(ds: ClusteredDataset, fit_x: CpmFit, fit_y: CpmFit,
                   cluster_weights=None) -> EstimatingSystem:
    """The stacked system behind the between-cluster correlation."""
    _check_fits(ds, fit_x, fit_y)
    w = compute_weights(ds, "cluster") if cluster_weights is None else cluster_weights
    scale, within = _cluster_layout(ds, w)
    cw = w.cluster_weights
    bx, by = fit_x.beta_full, fit_y.beta_full
    mux, muy = cw @ bx, cw @ by
    Mx, My = cw @ (bx * bx), cw @ (by * by)
    Fx = _between_F(bx, mux, Mx)[0]
    Fy = _between_F(by, muy, My)[0]
    t = np.array([cw @ Fx, cw @ Fy, cw @ (Fx * Fy), cw @ (Fx * Fx), cw @ (Fy * Fy)])
    moments = np.concatenate([[mux, muy, Mx, My], t])
    return EstimatingSystem("between", fit_x, fit_y, moments, scale, within)


def _flag_degenerate(se, value):
    return ("degenerate_se",) if se < 1e-10 or abs(value) >= 1.0 - 1e-12 else ()


def sandwich_gamma_w(ds, fit_x, fit_y, w=None, level: float = 0.95, fisher_z: bool = False):
    """Sandwich SE and Wald CI of the within-cluster correlation.

    Returns
    -------
    se : float
    ci : (float, float)
    """
    w = compute_weights(ds, "cluster") if w is None else w
    _require_equal_cluster(w, "within-cluster")
    system = within_system(ds, fit_x, fit_y, w)
    value = system.correlation()
    se = system.correlation_se()
    return se, wald_interval(value, se, level, fisher_z)


def sandwich_gamma_b(ds, fit_x, fit_y, cluster_weights=None, level: float = 0.95,
                     value: float | None = None, fisher_z: bool = False):
    """Sandwich SE of the between-cluster correlation and a Wald CI around ``value``.

    The SE comes from the normal random-effects moment system; ``value``
    (the point estimate to centre the interval on) defaults to the
    system's own normal-theory correlation.
    """
    w = compute_weights(ds, "cluster") if cluster_weights is None else cluster_weights
    _require_equal_cluster(w, "between-cluster")
    system = between_system(ds, fit_x, fit_y, w)
    se = system.correlation_se()
    centre = system.correlation() if value is None else value
    return se, wald_interval(centre, se, level, fisher_z)


# ---------------------------------------------------------------------------
# total correlation: influence function


def _tail_sums(values, weights, z):
    """``sum_k w_k z_k [I(v_k > v) + I(v_k = v)/2]`` at every ``v`` in ``values``."""
    support, inv = np.unique(values, return_inverse=True)
    s = np.bincount(inv, weights=weights * z, minlength=len(support))
    above = s.sum() - np.cumsum(s)
    return (above + 0.5 * s)[inv]


def gamma_t_influence(ds: ClusteredDataset, w: WeightVector | None = None) -> np.ndarray:
    """Per-cluster influence values of the total correlation.

    The weighted mean of the returned values (with cluster weights) is zero
    and ``sum_i w_i.^2 IF_i^2`` estimates the variance.
    """
    w = compute_weights(ds, "cluster") if w is None else w
    ww = w.weights
    a = _midcdf_at_data(ds.x, ww)
    b = _midcdf_at_data(ds.y, ww)
    ea2, eb2, mab = ww @ (a * a), ww @ (b * b), ww @ (a * b)
    va, vb = ea2 - 0.25, eb2 - 0.25
    if va <= 1e-14 or vb <= 1e-14:
        raise DegenerateInputError("zero rank variance: total correlation undefined")
    gamma = (mab - 0.25) / np.sqrt(va * vb)
    dm = a * b + _tail_sums(ds.x, ww, b) + _tail_sums(ds.y, ww, a) - 3.0 * mab
    dva = a * a + 2.0 * _tail_sums(ds.x, ww, a) - 3.0 * ea2
    dvb = b * b + 2.0 * _tail_sums(ds.y, ww, b) - 3.0 * eb2
    point = dm / np.sqrt(va * vb) - 0.5 * gamma * (dva / va + dvb / vb)
    cw = w.cluster_weights
    return np.bincount(ds.cluster_index, weights=ww * point, minlength=ds.n_clusters) / cw


# ---------------------------------------------------------------------------
# cluster bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    estimator: str
    se: float
    ci: tuple[float, float]
    level: float
    replicates: np.ndarray = field(repr=False)
    failures: dict = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return sum(self.failures.values())


def _resample_weights(ds, boot, idx, weights):
    if isinstance(weights, WeightVector):
        if weights.scheme is WeightScheme.CUSTOM:
            rows = np.concatenate([np.arange(ds.offsets[i], ds.offsets[i + 1]) for i in idx])
            return compute_weights(boot, "custom", weights.weights[rows])
        return weights.scheme.value
    return weights


def _one_resample(args):
    ds, which, child, weights, link, psr, finite = args
    rng = np.random.default_rng(child)
    idx = rng.integers(0, ds.n_clusters, ds.n_clusters)
    boot = ds.take_clusters(idx, relabel=True)
    out = {}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = point_estimates(boot, which, link=link,
                                  weights=_resample_weights(ds, boot, idx, weights), psr=psr,
                                  finite_clusters=finite)
    except (ValueError, ArithmeticError) as exc:
        return {tag: type(exc).__name__ for tag in which}
    for tag in which:
        if tag in res.estimates:
            out[tag] = res.estimates[tag].value
        else:
            exc = res.errors.get(tag) or res.errors.get("cpm") or next(iter(res.errors.values()), None)
            out[tag] = type(exc).__name__ if exc is not None else "Missing"
    return out


def cluster_bootstrap(ds: ClusteredDataset, estimator="gamma_t", B: int = 1000, seed: int = 0,
                      w="cluster", *, link="probit", psr="cpm", finite_clusters: bool = False,
                      level: float = 0.95, max_fail: float = 0.05, n_jobs: int = 1):
    """Cluster bootstrap SE and percentile CI.

    Parameters
    ----------
    estimator : str or sequence of str
        Tag(s) from :data:`ESTIMATORS`.  All requested estimators share the
        same resamples.
    B : int
        Number of resamples.
    seed : int
        Resample ``b`` draws from child ``b`` of ``SeedSequence(seed)``, so
        results do not depend on ``n_jobs``.
    w : str or WeightVector
        Weighting scheme, re-applied within each resample.

    Returns
    -------
    BootstrapResult, or a dict of them keyed by tag when ``estimator`` is a
    sequence.

    Raises
    ------
    DegenerateInputError
        Fewer than three clusters.
    NumericalError
        More than ``max_fail`` of the resamples failed for some estimator.
    """
    single = isinstance(estimator, str)
    which = [estimator] if single else list(estimator)
    unknown = set(which) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    if ds.n_clusters < 3:
        raise DegenerateInputError("cluster bootstrap needs at least 3 clusters")
    if B < 2:
        raise ValueError("B must be at least 2")
    if B < 200:
        warnings.warn(f"B = {B} is small for a bootstrap standard error", UserWarning, stacklevel=2)
    children = np.random.SeedSequence(seed).spawn(B)
    jobs = [(ds, which, c, w, link, psr, finite_clusters) for c in children]
    if n_jobs == 1:
        results = [_one_resample(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_one_resample, jobs, chunksize=max(1, B // (4 * n_jobs))))
    out = {}
    for tag in which:
        vals = [r[tag] for r in results]
        good = np.array([v for v in vals if not isinstance(v, str)], dtype=float)
        census: dict = {}
        for v in vals:
            if isinstance(v, str):
                census[v] = census.get(v, 0) + 1
        if sum(census.values()) > max_fail * B:
            raise NumericalError(
                f"{tag}: {sum(census.values())} of {B} bootstrap resamples failed ({census})")
        alpha = 1.0 - level
        lo, hi = np.quantile(good, [alpha / 2.0, 1.0 - alpha / 2.0])
        out[tag] = BootstrapResult(tag, float(np.std(good, ddof=1)), (float(lo), float(hi)),
                                   level, good, census)
    return out[estimator] if single else out


def var_gamma_t(ds: ClusteredDataset, w=None, method: str = "resample", *, B: int = 1000,
                seed: int = 0, level: float = 0.95, fisher_z: bool = False):
    """SE and CI of the total correlation.

    ``method="resample"`` is the cluster bootstrap (percentile CI);
    ``method="influence"`` uses the cluster-summed influence function and
    a Wald CI.

    Returns
    -------
    se : float
    ci : (float, float)
    """
    w = compute_weights(ds, "cluster") if w is None else w
    if isinstance(w, str):
        w = compute_weights(ds, w)
    if method == "resample":
        r = cluster_bootstrap(ds, "gamma_t", B, seed, w, level=level)
        return r.se, r.ci
    if method != "influence":
        raise ValueError(f"method must be 'resample' or 'influence', not {method!r}")
    if ds.n_clusters < 2:
        raise DegenerateInputError("influence variance needs at least 2 clusters")
    infl = gamma_t_influence(ds, w)
    cw = w.cluster_weights
    se = float(np.sqrt(np.sum((cw * infl) ** 2)))
    value = total_spearman(ds, w)
    return se, wald_interval(value, se, level, fisher_z)
