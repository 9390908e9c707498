"""
Cumulative probability models of one variable on cluster indicators.

The model is ``g(P(X <= x_(c) | cluster i)) = alpha_c - beta_i`` with one
intercept per distinct observed value (except the largest) and one shift per
cluster, the first cluster being the reference (``beta = 0``).  Fitting is
Newton-Raphson on the multinomial log-likelihood.

The negative Hessian has an arrow structure: the intercept block is
tridiagonal (an observation in category c touches only alpha_{c-1} and
alpha_c), the cluster block is diagonal and the coupling block holds at most
two entries per observation.  :class:`BlockSolver` eliminates the intercepts
with a banded Cholesky factorisation and solves the dense (n-1) x (n-1)
Schur complement, so an iteration costs O(C n + n^3) instead of O((C+n)^3).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

from .dataset import ClusteredDataset
from .exceptions import ConvergenceError, DataError, SeparationError
from .links import LinkFunction, get_link

__all__ = [
    "CpmFit",
    "BlockSolver",
    "AsymmetricLinkWarning",
    "fit_cpm",
    "fit_cpm_dataset",
    "psr_from_cpm",
    "psr_nonparametric",
    "cluster_median_coeffs",
]

SEPARATION_BOUND = 30.0


class AsymmetricLinkWarning(UserWarning):
    """Cluster coefficients are not latent medians under an asymmetric link."""


def _factorize(clusters):
    """Integer cluster codes in first-appearance order, plus the labels."""
    clusters = np.asarray(clusters)
    labels, first, inverse = np.unique(clusters, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse.ravel()], [str(v) for v in labels[order]]


@dataclass
class _Terms:
    """Per-observation pieces of the likelihood at one parameter value."""

    upper: np.ndarray
    lower: np.ndarray
    pi: np.ndarray
    g_u: np.ndarray
    g_l: np.ndarray


class BlockSolver:
    """Solve ``P z = r`` for the (positive definite) negative Hessian ``P``.

    Parameters
    ----------
    diag_a, off_a : ndarray
        Diagonal and super-diagonal of the tridiagonal intercept block.
    diag_b : ndarray
        Diagonal of the cluster block (length n - 1).
    K : sparse matrix, shape (C - 1, n - 1)
        Intercept/cluster coupling block.
    """

    def __init__(self, diag_a, off_a, diag_b, K):
        m = len(diag_a)
        ab = np.zeros((2, m))
        ab[0, 1:] = off_a
        ab[1, :] = diag_a
        try:
            self._cb = linalg.cholesky_banded(ab, lower=False)
        except linalg.LinAlgError as exc:
            raise ConvergenceError(f"intercept block not positive definite: {exc}") from None
        self.m = m
        self.q = len(diag_b)
        self.K = sparse.csr_matrix(K) if self.q else None
        if self.q:
            self.W = linalg.cho_solve_banded((self._cb, False), self.K.toarray())
            S = np.diag(np.asarray(diag_b, dtype=float)) - (self.K.T @ self.W)
            S = 0.5 * (S + S.T)
            try:
                self._S = linalg.cho_factor(S, lower=True, check_finite=False)
            except linalg.LinAlgError as exc:
                raise ConvergenceError(f"cluster Schur complement not positive definite: {exc}") from None

    @property
    def size(self) -> int:
        return self.m + self.q

    def solve(self, r):
        """Solve for one right-hand side (1-D) or several (columns of a 2-D array)."""
        r = np.asarray(r, dtype=float)
        ra, rb = r[: self.m], r[self.m:]
        y = linalg.cho_solve_banded((self._cb, False), ra, check_finite=False)
        if not self.q:
            return y
        xb = linalg.cho_solve(self._S, rb - self.K.T @ y, check_finite=False)
        xa = y - self.W @ xb
        return np.concatenate([xa, xb], axis=0)

    def matvec(self, z, diag_a, off_a, diag_b):
        """``P @ z`` from the stored blocks (for diagnostics and tests)."""
        z = np.asarray(z, dtype=float)
        za, zb = z[: self.m], z[self.m:]
        out_a = diag_a * za
        out_a[:-1] += off_a * za[1:]
        out_a[1:] += off_a * za[:-1]
        if not self.q:
            return out_a
        out_a = out_a + self.K @ zb
        out_b = diag_b * zb + self.K.T @ za
        return np.concatenate([out_a, out_b])


@dataclass(frozen=True, eq=False)
class CpmFit:
    """A fitted cumulative probability model.

    Attributes
    ----------
    link : LinkFunction
    support : ndarray
        The C distinct observed values, increasing.
    alpha : ndarray
        C - 1 strictly increasing intercepts.
    beta : ndarray
        n - 1 cluster shifts (clusters 2..n; the first cluster is the reference).
    cluster_ids : tuple of str
    codes, cluster_index : ndarray
        Category (0-based) and cluster of every observation, in input order.
    """

    link: LinkFunction
    support: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    cluster_ids: tuple
    codes: np.ndarray
    cluster_index: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    trace: tuple = field(default=(), repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_categories(self) -> int:
        return len(self.support)

    @property
    def n_params(self) -> int:
        return len(self.alpha) + len(self.beta)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @property
    def beta_full(self) -> np.ndarray:
        """Shifts for all n clusters, 0 for the reference."""
        return np.concatenate([[0.0], self.beta])

    def cluster_cdf(self, cluster) -> np.ndarray:
        """Fitted conditional CDF at every support point for one cluster."""
        i = self._cluster_pos(cluster)
        b = self.beta_full[i]
        return np.concatenate([self.link.cdf(self.alpha - b), [1.0]])

    def cell_probabilities(self, cluster) -> np.ndarray:
        i = self._cluster_pos(cluster)
        b = self.beta_full[i]
        a = np.concatenate([[-np.inf], self.alpha, [np.inf]])
        return self.link.cell(a[1:] - b, a[:-1] - b)

    def psr(self) -> np.ndarray:
        """Probability-scale residual of every observation (input order)."""
        t = _terms(self.link, self.alpha, self.beta_full, self.codes, self.cluster_index)
        return self.link.cdf(t.upper) + self.link.cdf(t.lower) - 1.0

    def trace_lines(self) -> list[str]:
        """Iteration log as tab-separated text lines."""
        return ["iter\tloglik\tgrad_max\tstep"] + [
            f"{it}\t{ll:.12g}\t{g:.3e}\t{s:.3g}" for it, ll, g, s in self.trace
        ]

    def _cluster_pos(self, cluster) -> int:
        if isinstance(cluster, (int, np.integer)) and not isinstance(cluster, bool):
            if 0 <= cluster < self.n_clusters:
                return int(cluster)
            raise KeyError(f"cluster position {cluster} out of range")
        try:
            return self.cluster_ids.index(str(cluster))
        except ValueError:
            raise KeyError(f"unknown cluster id {cluster!r}") from None

    @cached_property
    def _hessian_blocks(self):
        t = _terms(self.link, self.alpha, self.beta_full, self.codes, self.cluster_index)
        return _neg_hessian(self.link, t, self.codes, self.cluster_index,
                            self.n_categories, self.n_clusters)

    @cached_property
    def solver(self) -> BlockSolver:
        """Factorisation of the negative Hessian at the fitted parameters."""
        return BlockSolver(*self._hessian_blocks)


def _terms(link, alpha, beta_full, codes, cidx) -> _Terms:
    a = np.concatenate([[-np.inf], alpha, [np.inf]])
    b = beta_full[cidx]
    upper = a[codes + 1] - b
    lower = a[codes] - b
    pi = link.cell(upper, lower)
    return _Terms(upper, lower, pi, link.pdf(upper), link.pdf(lower))


def _loglik(pi) -> float:
    if np.any(~(pi > 0)):
        return -np.inf
    return float(np.sum(np.log(pi)))


def _gradient(t: _Terms, codes, cidx, C, n):
    """Gradient of the log-likelihood in (alpha, beta[1:])."""
    su = t.g_u / t.pi
    sl = t.g_l / t.pi
    m = C - 1
    ga = np.bincount(codes, weights=su, minlength=C)[:m]
    ga -= np.bincount(codes, weights=sl, minlength=C)[1:C]
    gb = -np.bincount(cidx, weights=su - sl, minlength=n)[1:]
    return np.concatenate([ga, gb])


def _neg_hessian(link, t: _Terms, codes, cidx, C, n):
    """Blocks of minus the Hessian: tridiagonal (alpha), diagonal (beta), coupling."""
    pi = t.pi
    h_u = link.dpdf(t.upper)
    h_l = link.dpdf(t.lower)
    su = t.g_u / pi
    sl = t.g_l / pi
    m = C - 1
    # d2l/dalpha_c^2 for the upper cut, d2l/dalpha_{c-1}^2 for the lower cut
    d_up = h_u / pi - su * su
    d_lo = -h_l / pi - sl * sl
    diag_a = -(np.bincount(codes, weights=d_up, minlength=C)[:m]
               + np.bincount(codes, weights=d_lo, minlength=C)[1:C])
    # cross term between alpha_{c-1} and alpha_c, attributed to the pair (c-1, c)
    cross = su * sl
    off_a = -np.bincount(codes, weights=cross, minlength=C)[1:m]
    q = n - 1
    dbb = (h_u - h_l) / pi - (su - sl) ** 2
    diag_b = -np.bincount(cidx, weights=dbb, minlength=n)[1:]
    if q == 0:
        return diag_a, off_a, np.zeros(0), sparse.csr_matrix((m, 0))
    k_up = -(-h_u / pi + su * (su - sl))
    k_lo = -(h_l / pi - sl * (su - sl))
    keep = cidx > 0
    up = keep & (codes < m)
    lo = keep & (codes > 0)
    rows = np.concatenate([codes[up], codes[lo] - 1])
    cols = np.concatenate([cidx[up] - 1, cidx[lo] - 1])
    vals = np.concatenate([k_up[up], k_lo[lo]])
    K = sparse.coo_matrix((vals, (rows, cols)), shape=(m, q)).tocsr()
    return diag_a, off_a, diag_b, K


def _check_separation(codes, cidx, n, cluster_ids):
    if n < 2:
        return
    mins = np.full(n, np.iinfo(np.int64).max)
    maxs = np.full(n, -1)
    np.minimum.at(mins, cidx, codes)
    np.maximum.at(maxs, cidx, codes)
    order_max = np.argsort(maxs)
    order_min = np.argsort(mins)
    for i in range(n):
        other_max = maxs[order_max[-1]] if order_max[-1] != i else maxs[order_max[-2]]
        other_min = mins[order_min[0]] if order_min[0] != i else mins[order_min[1]]
        if mins[i] > other_max:
            raise SeparationError(
                f"cluster {cluster_ids[i]!r} lies entirely above every other cluster; "
                "its coefficient diverges", cluster_id=cluster_ids[i])
        if maxs[i] < other_min:
            raise SeparationError(
                f"cluster {cluster_ids[i]!r} lies entirely below every other cluster; "
                "its coefficient diverges", cluster_id=cluster_ids[i])


def fit_cpm(values, clusters, link="probit", *, tol: float = 1e-8, max_iter: int = 100,
            rel_tol: float = 1e-12, stall_tol: float = 1e-6, cluster_ids=None) -> CpmFit:
    """Fit a CPM of ``values`` on cluster indicators by maximum likelihood.

    Parameters
    ----------
    values : array_like
        Orderable outcomes; each distinct value is one ordinal category.
    clusters : array_like
        Cluster label of each observation.  The first label to appear is the
        reference cluster.  When ``cluster_ids`` is given, ``clusters`` must
        already be integer positions into it.
    link : str or LinkFunction
        ``probit`` (default), ``logit``, ``loglog`` or ``cloglog``.
    tol : float
        Convergence threshold on the max-norm of the score.
    rel_tol : float
        Also stop once a full Newton step changes the log-likelihood by at
        most ``rel_tol`` relative to its size (the score of a model with
        thousands of narrow cells cannot always be pushed below ``tol`` in
        double precision).
    max_iter : int
        Newton iteration limit.
    stall_tol : float
        If step-halving cannot improve the likelihood while the score is below
        this level, the fit is accepted as converged at machine precision.

    Raises
    ------
    SeparationError
        A cluster lies strictly above or below all others, or a shift exceeds
        the separation bound during iteration.
    ConvergenceError
        Tolerance not met within ``max_iter`` iterations.
    """
    link = get_link(link)
    values = np.asarray(values, dtype=float).ravel()
    if cluster_ids is None:
        cidx, ids = _factorize(clusters)
    else:
        cidx = np.asarray(clusters, dtype=np.int64).ravel()
        ids = [str(c) for c in cluster_ids]
    if len(cidx) != len(values):
        raise DataError("values and clusters must have the same length")
    ids = tuple(ids)
    n = len(ids)
    support, codes = np.unique(values, return_inverse=True)
    codes = codes.ravel().astype(np.int64)
    C = len(support)
    if C < 2:
        raise DataError("a CPM needs at least two distinct outcome values")
    _check_separation(codes, cidx, n, ids)
    N = len(values)

    counts = np.bincount(codes, minlength=C)
    alpha = link.quantile(np.cumsum(counts)[:-1] / N)
    beta = np.zeros(n - 1)
    bfull = np.concatenate([[0.0], beta])
    t = _terms(link, alpha, bfull, codes, cidx)
    ll = _loglik(t.pi)
    trace = []
    converged = False
    gnorm = np.inf
    it = 0
    for it in range(max_iter + 1):
        grad = _gradient(t, codes, cidx, C, n)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            converged = True
            break
        if it == max_iter:
            break
        solver = BlockSolver(*_neg_hessian(link, t, codes, cidx, C, n))
        step = solver.solve(grad)
        theta = np.concatenate([alpha, beta])
        s = 1.0
        accepted = False
        while s >= 1e-10:
            cand = theta + s * step
            ca, cb = cand[: C - 1], cand[C - 1:]
            if C == 2 or np.all(np.diff(ca) > 0):
                cbf = np.concatenate([[0.0], cb])
                ct = _terms(link, ca, cbf, codes, cidx)
                cll = _loglik(ct.pi)
                if cll >= ll:
                    accepted = True
                    break
                # near the optimum the likelihood is flat to rounding; judge by the score
                if ll - cll <= rel_tol * abs(ll) and np.max(
                        np.abs(_gradient(ct, codes, cidx, C, n))) < gnorm:
                    accepted = True
                    break
            s *= 0.5
        if not accepted:
            if gnorm <= stall_tol:
                converged = True
            break
        trace.append((it + 1, cll, gnorm, s))
        small_change = abs(cll - ll) <= rel_tol * abs(ll)
        alpha, beta, t, ll = ca, cb, ct, cll
        if beta.size and np.max(np.abs(beta)) > SEPARATION_BOUND:
            j = int(np.argmax(np.abs(beta))) + 1
            raise SeparationError(
                f"coefficient of cluster {ids[j]!r} exceeded {SEPARATION_BOUND} "
                "(quasi-complete separation)", cluster_id=ids[j])
        if small_change and (s == 1.0 or gnorm <= stall_tol):
            grad = _gradient(t, codes, cidx, C, n)
            gnorm = float(np.max(np.abs(grad)))
            converged = True
            it += 1
            break
    if not converged:
        raise ConvergenceError(
            f"CPM did not converge after {it} iterations (max |score| = {gnorm:.3e})",
            gradient_norm=gnorm, iterations=it)
    return CpmFit(link, support, alpha, beta, ids, codes, cidx, ll, converged, it,
                  gnorm, tuple(trace))


def fit_cpm_dataset(ds: ClusteredDataset, axis: str = "x", link="probit", **options) -> CpmFit:
    """Fit the CPM of one variable of ``ds`` on its cluster indicators."""
    return fit_cpm(ds.values(axis), ds.cluster_index, link,
                   cluster_ids=ds.cluster_ids, **options)


def psr_from_cpm(fit: CpmFit, cluster, value) -> float:
    """Probability-scale residual ``F(x|i) + F(x-|i) - 1`` of one value."""
    i = fit._cluster_pos(cluster)
    pos = np.searchsorted(fit.support, value)
    if pos >= len(fit.support) or fit.support[pos] != value:
        raise KeyError(f"value {value!r} is not in the fitted support")
    a = np.concatenate([[-np.inf], fit.alpha, [np.inf]])
    b = fit.beta_full[i]
    return float(fit.link.cdf(a[pos + 1] - b) + fit.link.cdf(a[pos] - b) - 1.0)


def psr_nonparametric(ds: ClusteredDataset, axis: str = "x") -> np.ndarray:
    """PSRs from each cluster's own empirical mid-CDF: ``2 F*_i(x) - 1``."""
    v = ds.values(axis)
    # sort by (cluster, value): within-cluster mid-ranks from run boundaries
    order = np.lexsort((v, ds.cluster_index))
    sv, sc = v[order], ds.cluster_index[order]
    new_run = np.ones(len(v), dtype=bool)
    new_run[1:] = (sv[1:] != sv[:-1]) | (sc[1:] != sc[:-1])
    run_id = np.cumsum(new_run) - 1
    run_start = np.flatnonzero(new_run)
    run_len = np.bincount(run_id)
    pos_in_cluster = np.arange(len(v)) - ds.offsets[sc]
    start_in_cluster = pos_in_cluster[run_start][run_id]
    k = ds.sizes[sc].astype(float)
    fstar = (start_in_cluster + 0.5 * run_len[run_id]) / k
    out = np.empty(len(v))
    out[order] = 2.0 * fstar - 1.0
    return out


def cluster_median_coeffs(fit: CpmFit) -> np.ndarray:
    """Latent-scale cluster medians ``(0, beta_2, ..., beta_n)``.

    Under an asymmetric link ``g(0.5) != 0`` and the shifts are only
    location proxies; the values are returned with a warning.
    """
    if not fit.link.symmetric:
        warnings.warn(f"{fit.link.kind} link is asymmetric; cluster coefficients are "
                      "not latent medians", AsymmetricLinkWarning, stacklevel=2)
    return fit.beta_full
