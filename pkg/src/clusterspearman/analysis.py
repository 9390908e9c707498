"""
One-call analysis of a clustered dataset: every estimator with standard
errors and confidence intervals, routed to the analytic method where one
applies and to the cluster bootstrap otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ClusteredDataset, WeightScheme, WeightVector, compute_weights
from .estimators import ESTIMATORS, CorrelationEstimate, PointEstimates, point_estimates
from .exceptions import InferenceUnsupportedError, NumericalError
from .inference import (cluster_bootstrap, sandwich_gamma_b, sandwich_gamma_w, var_gamma_t,
                        wald_interval)

__all__ = ["Analysis", "analyze", "CI_METHODS"]

CI_METHODS = ("analytic", "bootstrap", "none")


@dataclass
class Analysis:
    """Estimates with intervals plus the by-products of fitting."""

    estimates: dict
    points: PointEstimates
    ci: str
    level: float
    notes: list = field(default_factory=list)

    @property
    def errors(self) -> dict:
        return self.points.errors

    def __getitem__(self, tag) -> CorrelationEstimate:
        return self.estimates[tag]

    def records(self) -> list[dict]:
        """Flat rows: estimators first, then rank ICCs and D corrections."""
        rows = [self.estimates[t].as_record(t) for t in ESTIMATORS if t in self.estimates]
        for axis, icc in (("x", self.points.icc_x), ("y", self.points.icc_y)):
            if icc is None:
                continue
            for name, value, method in ((f"rank_icc_{axis}", icc.gamma_I, "RankICC"),
                                        (f"d_{axis}", icc.D_hat, "DCorrection")):
                rows.append({"estimator": name, "value": float(value), "se": None,
                             "ci_lo": None, "ci_hi": None, "method": method,
                             "ci_method": None, "level": None, "clipped": False, "flags": []})
        for tag, exc in self.errors.items():
            rows.append({"estimator": tag, "value": None, "se": None, "ci_lo": None,
                         "ci_hi": None, "method": "Failed", "ci_method": None, "level": None,
                         "clipped": False, "flags": [f"{type(exc).__name__}: {exc}"]})
        return rows


def analyze(ds: ClusteredDataset, *, estimators=None, link="probit", weights="cluster",
            psr="cpm", finite_clusters: bool = False, ci="analytic", level: float = 0.95,
            boot_reps: int = 1000,
            seed: int = 0, t_method: str = "influence", fallback: bool = True,
            fisher_z: bool = False, n_jobs: int = 1) -> Analysis:
    """Estimate all requested correlations and attach intervals.

    Parameters
    ----------
    ds : ClusteredDataset
    estimators : iterable of str, optional
        Tags from ``ESTIMATORS``; default all applicable.
    link, weights, psr, finite_clusters
        Passed to :func:`point_estimates`.
    ci : {"analytic", "bootstrap", "none"}
        ``analytic`` uses the sandwich systems for the within- and
        between-cluster estimators and ``t_method`` for the total; the
        naive estimators only have bootstrap intervals.
    boot_reps, seed
        Cluster bootstrap settings.
    t_method : {"influence", "resample"}
        Analytic route for the total correlation.
    fallback : bool
        Bootstrap the estimators whose analytic route fails or does not
        apply (non-equal-cluster weights, nonparametric PSRs, clipped
        approximation estimate).  When False those keep no interval, except
        a clipped approximation estimate, which keeps its Wald interval.
    """
    if ci not in CI_METHODS:
        raise ValueError(f"ci must be one of {CI_METHODS}, not {ci!r}")
    w = weights if isinstance(weights, WeightVector) else compute_weights(ds, weights)
    which = None if estimators is None else list(estimators)
    if which is not None and "gamma_b_approx" not in which:
        # rank ICCs are always reported
        which_fit = which + ["gamma_b_approx"]
    else:
        which_fit = which
    pts = point_estimates(ds, which_fit, link=link, weights=w, psr=psr,
                          finite_clusters=finite_clusters)
    if which is not None:
        est = {t: e for t, e in pts.estimates.items() if t in which}
        pts.errors = {t: e for t, e in pts.errors.items()
                      if t in which or t in ("cpm", "icc_x", "icc_y")}
    else:
        est = dict(pts.estimates)
    out = Analysis(est, pts, ci, level)
    if ci == "none" or not est:
        return out

    to_boot = []
    if ci == "bootstrap":
        to_boot = list(est)
    else:
        _analytic(out, ds, w, psr, level, t_method, fisher_z, fallback, to_boot)
    if to_boot:
        res = cluster_bootstrap(ds, to_boot, boot_reps, seed, w, link=link, psr=psr,
                                finite_clusters=finite_clusters, level=level, n_jobs=n_jobs)
        for tag, r in res.items():
            flags = (f"boot_failed={r.n_failed}",) if r.n_failed else ()
            est[tag] = est[tag].with_interval(r.se, r.ci, level, "bootstrap", flags)
    return out


def _analytic(out: Analysis, ds, w, psr, level, t_method, fisher_z, fallback, to_boot):
    est = out.estimates
    pts = out.points
    equal_cluster = w.scheme is WeightScheme.EQUAL_CLUSTER

    def defer(tag, reason):
        out.notes.append(f"{tag}: {reason}; " + ("using cluster bootstrap" if fallback
                                                 else "no interval"))
        if fallback:
            to_boot.append(tag)

    if "gamma_t" in est:
        if t_method == "resample":
            to_boot.append("gamma_t")
        else:
            se, ci = var_gamma_t(ds, w, "influence", level=level, fisher_z=fisher_z)
            est["gamma_t"] = est["gamma_t"].with_interval(se, ci, level, "influence")

    if "gamma_w" in est:
        if psr != "cpm":
            defer("gamma_w", "no analytic route for nonparametric PSRs")
        elif not equal_cluster:
            defer("gamma_w", "analytic inference needs equal-cluster weights")
        else:
            try:
                se, ci = sandwich_gamma_w(ds, pts.fit_x, pts.fit_y, w, level, fisher_z)
                est["gamma_w"] = est["gamma_w"].with_interval(se, ci, level, "sandwich")
            except (InferenceUnsupportedError, NumericalError) as exc:
                defer("gamma_w", f"sandwich failed ({exc})")

    between = [t for t in ("gamma_b_median", "gamma_b_approx") if t in est]
    if between:
        se = None
        if not equal_cluster:
            for t in between:
                defer(t, "analytic inference needs equal-cluster weights")
            between = []
        elif pts.fit_x is None:
            for t in between:
                defer(t, "CPM fits unavailable")
            between = []
        else:
            try:
                se = sandwich_gamma_b(ds, pts.fit_x, pts.fit_y, w, level)[0]
            except (InferenceUnsupportedError, NumericalError) as exc:
                for t in between:
                    defer(t, f"sandwich failed ({exc})")
                between = []
        for t in between:
            e = est[t]
            if e.clipped and fallback:
                defer(t, "estimate clipped to the boundary")
                continue
            flags = ("degenerate_se",) if se < 1e-10 or abs(e.value) >= 1.0 else ()
            est[t] = e.with_interval(se, wald_interval(e.value, se, level, fisher_z), level,
                                     "sandwich", flags)

    for t in ("naive_between", "naive_within"):
        if t in est and fallback:
            to_boot.append(t)
