"""
Weighted mid-CDFs and the rank quantities built directly on them: the
plug-in total Spearman correlation, the rank ICC and the finite-cluster
D correction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ClusteredDataset, WeightVector, compute_weights
from .exceptions import DataError, DegenerateInputError

__all__ = [
    "MidCdf",
    "RankIccEstimate",
    "weighted_mid_cdf",
    "mid_ranks",
    "weighted_corr",
    "total_spearman",
    "rank_icc",
    "d_correction",
]

_VAR_EPS = 1e-14


@dataclass(frozen=True, eq=False)
class MidCdf:
    """Weighted step CDF over the sorted distinct values ``support``.

    ``cdf[m]`` is F(support[m]) and ``cdf_left[m]`` is F(support[m]-).
    """

    support: np.ndarray
    cdf: np.ndarray
    cdf_left: np.ndarray

    @property
    def midcdf(self) -> np.ndarray:
        return 0.5 * (self.cdf + self.cdf_left)

    def __call__(self, v):
        """Return ``(F(v), F(v-), F*(v))`` for scalar or array ``v``.

        Values between support points get the step value of the last support
        point below them (and F(v-) = F(v) there, since no mass sits at v).
        """
        v = np.asarray(v, dtype=float)
        pos = np.searchsorted(self.support, v, side="right") - 1
        at = (pos >= 0) & (self.support[np.clip(pos, 0, None)] == v)
        F = np.where(pos >= 0, self.cdf[np.clip(pos, 0, None)], 0.0)
        F_left = np.where(at, self.cdf_left[np.clip(pos, 0, None)], F)
        return F, F_left, 0.5 * (F + F_left)


def _as_weights(weights, n: int) -> np.ndarray:
    if isinstance(weights, WeightVector):
        w = weights.weights
    elif weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DataError(f"weights have length {w.shape}, values have length {n}")
    return w


def weighted_mid_cdf(values, weights=None) -> MidCdf:
    """Weighted empirical CDF ``F(v) = sum w I(value <= v)`` with left limits."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("weighted_mid_cdf needs at least one value")
    w = _as_weights(weights, len(values))
    support, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=w, minlength=len(support))
    cdf = np.cumsum(mass)
    total = cdf[-1]
    cdf = cdf / total
    cdf_left = np.concatenate([[0.0], cdf[:-1]])
    cdf[-1] = 1.0
    return MidCdf(support, cdf, cdf_left)


def _midcdf_at_data(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """F*(v) at every observed value (the hot path of every estimator)."""
    support, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=w, minlength=len(support))
    mass /= mass.sum()
    upper = np.cumsum(mass)
    return (upper - 0.5 * mass)[inverse]


def mid_ranks(values) -> np.ndarray:
    """Classical mid-ranks (1-based, ties averaged)."""
    values = np.asarray(values, dtype=float)
    return len(values) * _midcdf_at_data(values, np.full(len(values), 1.0)) + 0.5


def weighted_corr(a, b, w) -> float:
    """Weighted Pearson correlation with weighted centring (weights sum to one)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    da = a - w @ a
    db = b - w @ b
    va = w @ (da * da)
    vb = w @ (db * db)
    if va <= _VAR_EPS or vb <= _VAR_EPS:
        raise DegenerateInputError("zero weighted variance: correlation undefined")
    r = (w @ (da * db)) / np.sqrt(va * vb)
    return float(np.clip(r, -1.0, 1.0))


def total_spearman(ds: ClusteredDataset, w: WeightVector | None = None) -> float:
    """Plug-in total Spearman correlation: weighted corr of F*_X(x) and F*_Y(y)."""
    if ds.n_obs < 2:
        raise DegenerateInputError("total Spearman needs at least two observations")
    w = compute_weights(ds, "cluster") if w is None else w
    ww = _as_weights(w, ds.n_obs)
    return weighted_corr(_midcdf_at_data(ds.x, ww), _midcdf_at_data(ds.y, ww), ww)


@dataclass(frozen=True)
class RankIccEstimate:
    """Rank ICC with its D correction and the sums behind them."""

    gamma_I: float
    D_hat: float
    numerator: float
    d_numerator: float
    denominator: float
    scheme: str | None = None

    @property
    def between_share(self) -> float:
        """``gamma_I - D``: weighted between-cluster share of the rank variance."""
        return self.gamma_I - self.D_hat


def _flatten_groups(groups, weights):
    if isinstance(groups, ClusteredDataset):
        raise TypeError("pass ds.groups('x') rather than a dataset")
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    if len(groups) == 0 or np.any(sizes < 1):
        raise DataError("every cluster needs at least one value")
    values = np.concatenate(groups)
    index = np.repeat(np.arange(len(groups)), sizes)
    if weights is None or (isinstance(weights, str)):
        scheme = weights or "cluster"
        if scheme == "cluster":
            w = 1.0 / (len(groups) * sizes[index].astype(float))
        elif scheme == "obs":
            w = np.full(len(values), 1.0 / len(values))
        else:
            raise DataError(f"unknown weight scheme {scheme!r}")
    else:
        w = _as_weights(weights, len(values))
    return values, index, sizes, w


def _icc_parts(groups, weights):
    values, index, sizes, w = _flatten_groups(groups, weights)
    fstar = _midcdf_at_data(values, w)
    e = fstar - w @ fstar
    den = float(w @ (e * e))
    if den <= _VAR_EPS:
        raise DegenerateInputError("constant variable: rank ICC undefined")
    n = len(sizes)
    cw = np.bincount(index, weights=w, minlength=n)
    k = sizes.astype(float)
    multi = sizes >= 2
    pair_norm = np.zeros(n)
    pair_norm[multi] = 2.0 / (k[multi] * (k[multi] - 1.0))
    # sum_{j<j'} a_j a_j' = ((sum a)^2 - sum a^2) / 2
    e_sum = np.bincount(index, weights=e, minlength=n)
    e_sq = np.bincount(index, weights=e * e, minlength=n)
    num = float(np.sum(cw * pair_norm * 0.5 * (e_sum ** 2 - e_sq)))
    f_sum = np.bincount(index, weights=fstar, minlength=n)
    d = fstar - (f_sum / k)[index]
    d_sq = np.bincount(index, weights=d * d, minlength=n)
    # within-cluster centred deviations sum to zero, so the pair sum is -sum d^2 / 2
    d_num = float(np.sum(cw * pair_norm * (-0.5) * d_sq))
    return num, d_num, den, multi.any()


def rank_icc(groups: Sequence, weights=None) -> RankIccEstimate:
    """Rank intraclass correlation of one variable.

    Parameters
    ----------
    groups : sequence of array_like
        Values of the variable, one array per cluster.
    weights : WeightVector, array, ``"cluster"`` or ``"obs"``, optional
        Observation weights aligned with the concatenated groups
        (default equal-cluster).

    Clusters of size one enter only the denominator.
    """
    num, d_num, den, has_pairs = _icc_parts(groups, weights)
    if not has_pairs:
        raise DegenerateInputError("rank ICC needs at least one cluster with two or more observations")
    if isinstance(weights, WeightVector):
        scheme = weights.scheme.value
    elif weights is None or isinstance(weights, str):
        scheme = weights or "cluster"
    else:
        scheme = None
    return RankIccEstimate(num / den, d_num / den, num, d_num, den, scheme)


def d_correction(groups: Sequence, weights=None) -> float:
    """Finite-cluster correction D (zero when every cluster is a singleton)."""
    num, d_num, den, has_pairs = _icc_parts(groups, weights)
    if not has_pairs:
        return 0.0
    return d_num / den
