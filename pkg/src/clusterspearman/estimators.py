"""
Total, within- and between-cluster Spearman correlation estimators and the
naive comparators based on sample cluster medians.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import stats

from .cpm import (AsymmetricLinkWarning, CpmFit, cluster_median_coeffs, fit_cpm_dataset,
                  psr_nonparametric)
from .dataset import ClusteredDataset, WeightVector, compute_weights
from .exceptions import DataError, DegenerateInputError, InstabilityError
from .rankcore import RankIccEstimate, rank_icc, total_spearman, weighted_corr

__all__ = [
    "Method",
    "CorrelationEstimate",
    "gamma_t",
    "gamma_w",
    "gamma_b_median",
    "gamma_b_approx",
    "naive_between",
    "naive_within",
    "cluster_medians",
    "PointEstimates",
    "point_estimates",
    "ESTIMATORS",
]


class Method(str, Enum):
    TOTAL = "Total"
    WITHIN_PSR = "WithinPSR"
    BETWEEN_MEDIAN = "BetweenMedian"
    BETWEEN_APPROX = "BetweenApprox"
    NAIVE_BETWEEN = "NaiveBetween"
    NAIVE_WITHIN = "NaiveWithin"


# estimator tag -> method
ESTIMATORS = {
    "gamma_t": Method.TOTAL,
    "gamma_w": Method.WITHIN_PSR,
    "gamma_b_median": Method.BETWEEN_MEDIAN,
    "gamma_b_approx": Method.BETWEEN_APPROX,
    "naive_between": Method.NAIVE_BETWEEN,
    "naive_within": Method.NAIVE_WITHIN,
}


@dataclass(frozen=True)
class CorrelationEstimate:
    """A correlation estimate with optional standard error and interval."""

    value: float
    method: Method
    se: float | None = None
    ci: tuple[float, float] | None = None
    level: float | None = None
    clipped: bool = False
    scheme: str | None = None
    ci_method: str | None = None
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not -1.0 <= self.value <= 1.0:
            raise ValueError(f"correlation {self.value} outside [-1, 1]")
        if self.clipped and abs(self.value) != 1.0:
            raise ValueError("clipped estimates must sit on the boundary")

    def with_interval(self, se, ci, level, ci_method, flags=()) -> "CorrelationEstimate":
        return replace(self, se=se, ci=ci, level=level, ci_method=ci_method,
                       flags=self.flags + tuple(flags))

    def as_record(self, name: str) -> dict:
        lo, hi = self.ci if self.ci is not None else (None, None)
        return {
            "estimator": name,
            "value": self.value,
            "se": self.se,
            "ci_lo": lo,
            "ci_hi": hi,
            "method": self.method.value,
            "ci_method": self.ci_method,
            "level": self.level,
            "clipped": self.clipped,
            "flags": list(self.flags),
        }


def _scheme_of(w) -> str | None:
    return w.scheme.value if isinstance(w, WeightVector) else None


def gamma_t(ds: ClusteredDataset, w: WeightVector | None = None) -> CorrelationEstimate:
    """Total Spearman correlation (weighted plug-in estimator)."""
    w = compute_weights(ds, "cluster") if w is None else w
    return CorrelationEstimate(total_spearman(ds, w), Method.TOTAL, scheme=_scheme_of(w))


def gamma_w(psr_x, psr_y, w) -> CorrelationEstimate:
    """Within-cluster Spearman correlation: weighted correlation of PSRs."""
    weights = w.weights if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    psr_x = np.asarray(psr_x, dtype=float)
    psr_y = np.asarray(psr_y, dtype=float)
    if not (psr_x.shape == psr_y.shape == weights.shape):
        raise DataError("PSR vectors and weights must be aligned")
    return CorrelationEstimate(weighted_corr(psr_x, psr_y, weights), Method.WITHIN_PSR,
                               scheme=_scheme_of(w))


def _midcdf(values, w):
    support, inv = np.unique(values, return_inverse=True)
    mass = np.bincount(inv, weights=w, minlength=len(support))
    mass /= mass.sum()
    return (np.cumsum(mass) - 0.5 * mass)[inv]


def gamma_b_median(beta_x, beta_y, cluster_weights=None) -> CorrelationEstimate:
    """Between-cluster Spearman correlation over CPM cluster medians.

    ``beta_x`` and ``beta_y`` hold one latent median per cluster, the
    reference cluster included (as 0).  ``cluster_weights`` defaults to 1/n.
    """
    bx = np.asarray(beta_x, dtype=float)
    by = np.asarray(beta_y, dtype=float)
    if bx.shape != by.shape or bx.ndim != 1:
        raise DataError("cluster coefficient vectors must be aligned 1-D arrays")
    if len(bx) < 2:
        raise DegenerateInputError("between-cluster correlation needs at least two clusters")
    if isinstance(cluster_weights, WeightVector):
        cw = cluster_weights.cluster_weights
    elif cluster_weights is None:
        cw = np.full(len(bx), 1.0 / len(bx))
    else:
        cw = np.asarray(cluster_weights, dtype=float)
    if np.ptp(bx) == 0 or np.ptp(by) == 0:
        raise DegenerateInputError("all cluster coefficients are equal")
    value = weighted_corr(_midcdf(bx, cw), _midcdf(by, cw), cw)
    return CorrelationEstimate(value, Method.BETWEEN_MEDIAN, scheme=_scheme_of(cluster_weights))


def gamma_b_approx(gamma_t, gamma_w, icc_x, icc_y, d_x=None, d_y=None) -> CorrelationEstimate:
    """Between-cluster correlation from the total/within decomposition.

    Accepts plain floats or the estimate objects; when estimate objects are
    passed their weighting schemes must agree.  Values outside [-1, 1] are
    clipped and flagged.

    Raises
    ------
    InstabilityError
        If ``(icc_x - d_x)(icc_y - d_y) <= 0``.
    """
    schemes = {getattr(o, "scheme", None) for o in (gamma_t, gamma_w, icc_x, icc_y)} - {None}
    if len(schemes) > 1:
        raise DataError(f"inputs were computed under different weighting schemes: {sorted(schemes)}")
    t = gamma_t.value if isinstance(gamma_t, CorrelationEstimate) else float(gamma_t)
    wv = gamma_w.value if isinstance(gamma_w, CorrelationEstimate) else float(gamma_w)
    if isinstance(icc_x, RankIccEstimate):
        d_x = icc_x.D_hat if d_x is None else d_x
        icc_x = icc_x.gamma_I
    if isinstance(icc_y, RankIccEstimate):
        d_y = icc_y.D_hat if d_y is None else d_y
        icc_y = icc_y.gamma_I
    d_x = 0.0 if d_x is None else float(d_x)
    d_y = 0.0 if d_y is None else float(d_y)
    between = (icc_x - d_x) * (icc_y - d_y)
    if not between > 0:
        raise InstabilityError(
            f"between-cluster radicand (I_X - D_X)(I_Y - D_Y) = {between:.3g} is not positive")
    within = (1.0 - icc_x + d_x) * (1.0 - icc_y + d_y)
    if within < 0:
        raise InstabilityError(f"within-cluster radicand is negative ({within:.3g})")
    raw = (t - np.sqrt(within) * wv) / np.sqrt(between)
    clipped = bool(raw > 1.0 or raw < -1.0)
    value = float(np.clip(raw, -1.0, 1.0))
    return CorrelationEstimate(value, Method.BETWEEN_APPROX, clipped=clipped,
                               scheme=next(iter(schemes), None),
                               flags=(f"raw={raw:.6g}",) if clipped else ())


def cluster_medians(ds: ClusteredDataset, axis: str) -> np.ndarray:
    """Sample median of each cluster (midpoint of the two central values for even k)."""
    return np.array([np.median(g) for g in ds.groups(axis)])


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateInputError("constant input: Spearman correlation undefined")
    return float(stats.spearmanr(a, b)[0])


def naive_between(ds: ClusteredDataset) -> CorrelationEstimate:
    """Spearman correlation of the sample cluster medians."""
    if ds.n_clusters < 3:
        raise DegenerateInputError("naive between-cluster estimate needs at least 3 clusters")
    return CorrelationEstimate(_spearman(cluster_medians(ds, "x"), cluster_medians(ds, "y")),
                               Method.NAIVE_BETWEEN)


def naive_within(ds: ClusteredDataset) -> CorrelationEstimate:
    """Mean over clusters of the Spearman correlation of deviations from the cluster medians.

    Subtracting a cluster's median does not change its within-cluster ranks, so each
    term is that cluster's own Spearman correlation. Clusters with fewer than two
    observations, or constant in either variable, are skipped.
    """
    if ds.x_kind.is_ordinal or ds.y_kind.is_ordinal:
        raise DataError("naive within-cluster estimate needs numeric variables (it subtracts medians)")
    dx = ds.x - cluster_medians(ds, "x")[ds.cluster_index]
    dy = ds.y - cluster_medians(ds, "y")[ds.cluster_index]
    rs = [float(stats.spearmanr(a, b)[0])
          for a, b in zip(np.split(dx, ds.offsets[1:-1]), np.split(dy, ds.offsets[1:-1]))
          if len(a) >= 2 and np.ptp(a) > 0 and np.ptp(b) > 0]
    if not rs:
        raise DegenerateInputError("no cluster has two distinct values of both variables")
    return CorrelationEstimate(float(np.mean(rs)), Method.NAIVE_WITHIN)


@dataclass
class PointEstimates:
    """Everything one pass over a dataset produces (no intervals)."""

    estimates: dict
    icc_x: RankIccEstimate | None = None
    icc_y: RankIccEstimate | None = None
    fit_x: CpmFit | None = None
    fit_y: CpmFit | None = None
    psr_x: np.ndarray | None = None
    psr_y: np.ndarray | None = None
    weights: WeightVector | None = None
    errors: dict = field(default_factory=dict)


def point_estimates(ds: ClusteredDataset, which=None, link="probit", weights="cluster",
                    psr="cpm", finite_clusters: bool = False,
                    raise_errors: bool = False) -> PointEstimates:
    """Compute the requested estimators, sharing CPM fits between them.

    Parameters
    ----------
    which : iterable of str, optional
        Estimator tags from :data:`ESTIMATORS`; default all that apply
        (``naive_within`` is skipped for ordinal data).
    link : str
        CPM link.
    weights : str or WeightVector
        ``"cluster"`` or ``"obs"`` or a prepared weight vector.
    psr : {"cpm", "nonparametric"}
        Source of the probability-scale residuals for ``gamma_w``.
    finite_clusters : bool
        Whether clusters are complete finite populations (e.g. couples).
        If so ``gamma_b_approx`` uses the estimated D corrections;
        otherwise the population D is zero and so is the correction.
    raise_errors : bool
        Re-raise the first estimator failure instead of recording it in
        ``errors``.
    """
    if which is None:
        which = [t for t in ESTIMATORS
                 if not (t == "naive_within" and (ds.x_kind.is_ordinal or ds.y_kind.is_ordinal))]
    which = list(which)
    unknown = set(which) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    if psr not in ("cpm", "nonparametric"):
        raise ValueError(f"psr must be 'cpm' or 'nonparametric', not {psr!r}")
    w = weights if isinstance(weights, WeightVector) else compute_weights(ds, weights)
    out = PointEstimates({}, weights=w)

    def attempt(tag, fn):
        try:
            return fn()
        except Exception as exc:  # recorded per estimator
            if raise_errors or not isinstance(exc, (ValueError, ArithmeticError)):
                raise
            out.errors[tag] = exc
            return None

    need_fit = "gamma_b_median" in which or (psr == "cpm" and {"gamma_w", "gamma_b_approx"} & set(which))
    if need_fit:
        fits = attempt("cpm", lambda: (fit_cpm_dataset(ds, "x", link), fit_cpm_dataset(ds, "y", link)))
        if fits is not None:
            out.fit_x, out.fit_y = fits
    if {"gamma_w", "gamma_b_approx"} & set(which):
        if psr == "cpm":
            if out.fit_x is not None:
                out.psr_x, out.psr_y = out.fit_x.psr(), out.fit_y.psr()
        else:
            out.psr_x, out.psr_y = psr_nonparametric(ds, "x"), psr_nonparametric(ds, "y")
    est = out.estimates
    if "gamma_t" in which or "gamma_b_approx" in which:
        r = attempt("gamma_t", lambda: gamma_t(ds, w))
        if r is not None and "gamma_t" in which:
            est["gamma_t"] = r
    if ("gamma_w" in which or "gamma_b_approx" in which) and out.psr_x is not None:
        r = attempt("gamma_w", lambda: gamma_w(out.psr_x, out.psr_y, w))
        if r is not None:
            est["gamma_w"] = r
    if "gamma_b_approx" in which:
        out.icc_x = attempt("icc_x", lambda: rank_icc(ds.groups("x"), w))
        out.icc_y = attempt("icc_y", lambda: rank_icc(ds.groups("y"), w))
        if None not in (out.icc_x, out.icc_y) and "gamma_w" in est:
            gt = gamma_t(ds, w)
            r = attempt("gamma_b_approx",
                        lambda: gamma_b_approx(gt, est["gamma_w"], out.icc_x, out.icc_y,
                                               None if finite_clusters else 0.0,
                                               None if finite_clusters else 0.0))
            if r is not None:
                est["gamma_b_approx"] = r
        if "gamma_w" not in which:
            est.pop("gamma_w", None)
    if "gamma_b_median" in which and out.fit_x is not None:
        r = attempt("gamma_b_median", lambda: gamma_b_median(
            _quiet_medians(out.fit_x), _quiet_medians(out.fit_y), w))
        if r is not None:
            est["gamma_b_median"] = r
    if "naive_between" in which:
        r = attempt("naive_between", lambda: naive_between(ds))
        if r is not None:
            est["naive_between"] = r
    if "naive_within" in which:
        r = attempt("naive_within", lambda: naive_within(ds))
        if r is not None:
            est["naive_within"] = r
    return out


def _quiet_medians(fit: CpmFit) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AsymmetricLinkWarning)
        return cluster_median_coeffs(fit)
