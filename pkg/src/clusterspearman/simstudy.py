"""
Simulation scenarios, their true correlations and a Monte Carlo study runner.

Every scenario builds on a latent additive model: a cluster effect
``U_i ~ N(mean_u, [[1, rho_b], [rho_b, 1]])`` plus member deviations
``R_ij ~ N(0, [[1, rho_w], [rho_w, 1]])``.

* ``I``: ``(x, y) = U + R``.
* ``II``: as I with ``y`` exponentiated.
* ``III``: ``x = exp(U_X) + R_X`` and ``y = exp(exp(U_Y) + R_Y)``.
* ``negpairs``: two members per cluster, ``U + R`` and ``U - R`` with
  ``R ~ N(0, 3 [[1, rho_w], [rho_w, 1]])``; the rank ICC is negative.
* ``ordinal``: Scenario I cut into ``levels`` categories at the quantiles
  ``1/levels, ..., (levels-1)/levels`` of each marginal law ``N(mean, 2)``.

Replicate ``r`` of a study draws everything from child ``r`` of
``SeedSequence(seed)``, so a study is reproducible at any degree of
parallelism.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special, stats

from .analysis import analyze
from .dataset import ClusteredDataset, ValueKind
from .exceptions import DataError, NumericalError

__all__ = [
    "SCENARIOS",
    "ScenarioConfig",
    "TrueValues",
    "SimulationReport",
    "arcsin_spearman",
    "generate",
    "true_values",
    "run_study",
    "load_config",
]

SCENARIOS = ("I", "II", "III", "negpairs", "ordinal")
_ALIASES = {"1": "I", "2": "II", "3": "III", "negative_pairs": "negpairs", "negativepairs": "negpairs"}

# estimator tag -> which true value it targets
TARGET = {
    "gamma_t": "gamma_t",
    "gamma_w": "gamma_w",
    "naive_within": "gamma_w",
    "gamma_b_median": "gamma_b",
    "gamma_b_approx": "gamma_b",
    "naive_between": "gamma_b",
}


def arcsin_spearman(rho):
    """Spearman correlation of a bivariate normal with Pearson correlation ``rho``."""
    return 6.0 * np.arcsin(np.asarray(rho, dtype=float) / 2.0) / np.pi


def _parse_size(value):
    if isinstance(value, str):
        if ":" in value:
            lo, hi = value.split(":", 1)
            return int(lo), int(hi)
        return int(value)
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return int(lo), int(hi)
    return int(value)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation setting.

    ``cluster_size`` is a fixed size or an inclusive ``(k_min, k_max)``
    range from which sizes are drawn uniformly.
    """

    scenario: str = "I"
    rho_b: float = 0.0
    rho_w: float = 0.0
    n: int = 100
    cluster_size: int | tuple = 20
    mean_u: tuple = (1.0, -1.0)
    levels: int = 5
    seed: int = 0

    def __post_init__(self):
        sc = str(self.scenario)
        sc = _ALIASES.get(sc.lower(), sc)
        if sc.lower().startswith("ordinal") and sc.lower() != "ordinal":
            object.__setattr__(self, "levels", int(sc[len("ordinal"):]))
            sc = "ordinal"
        if sc not in SCENARIOS:
            raise DataError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        object.__setattr__(self, "scenario", sc)
        object.__setattr__(self, "cluster_size", _parse_size(self.cluster_size))
        object.__setattr__(self, "mean_u", tuple(float(v) for v in self.mean_u))
        for name in ("rho_b", "rho_w"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [-1, 1]")
        if self.n < 2:
            raise DataError("a study needs at least 2 clusters")
        k = self.cluster_size
        if isinstance(k, tuple):
            if not 1 <= k[0] <= k[1]:
                raise DataError(f"invalid cluster size range {k}")
        elif k < 1:
            raise DataError("cluster size must be at least 1")
        if sc == "negpairs" and k != 2:
            raise DataError("the negpairs scenario has clusters of exactly 2 members (use k = 2)")
        if sc == "ordinal" and self.levels < 2:
            raise DataError("ordinal scenarios need at least 2 levels")
        if len(self.mean_u) != 2:
            raise DataError("mean_u must have two entries")

    @property
    def label(self) -> str:
        sc = f"ordinal{self.levels}" if self.scenario == "ordinal" else self.scenario
        k = self.cluster_size
        k = f"{k[0]}:{k[1]}" if isinstance(k, tuple) else k
        return f"{sc} rho_b={self.rho_b:g} rho_w={self.rho_w:g} n={self.n} k={k}"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["cluster_size"] = list(self.cluster_size) if isinstance(self.cluster_size, tuple) \
            else self.cluster_size
        d["mean_u"] = list(self.mean_u)
        return d


def _bvn(rng, size, rho, scale=1.0):
    """Draws from ``N(0, scale [[1, rho], [rho, 1]])`` via the 2 x 2 Cholesky factor."""
    z = rng.standard_normal((size, 2))
    second = rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]
    return np.sqrt(scale) * np.column_stack([z[:, 0], second])


def _ordinal_cuts(config: ScenarioConfig, axis: int) -> np.ndarray:
    q = np.arange(1, config.levels) / config.levels
    return config.mean_u[axis] + np.sqrt(2.0) * special.ndtri(q)


def generate(config: ScenarioConfig, rng=None) -> ClusteredDataset:
    """Draw one dataset from ``config``."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    n = config.n
    k = config.cluster_size
    sizes = (rng.integers(k[0], k[1] + 1, n) if isinstance(k, tuple)
             else np.full(n, k, dtype=np.int64))
    u = np.asarray(config.mean_u) + _bvn(rng, n, config.rho_b)
    cidx = np.repeat(np.arange(n), sizes)
    ids = [f"c{i + 1}" for i in range(n)]
    if config.scenario == "negpairs":
        r = _bvn(rng, n, config.rho_w, scale=3.0)
        pair = np.empty((2 * n, 2))
        pair[0::2] = u + r
        pair[1::2] = u - r
        x, y = pair[:, 0], pair[:, 1]
    else:
        r = _bvn(rng, len(cidx), config.rho_w)
        if config.scenario == "III":
            x = np.exp(u[cidx, 0]) + r[:, 0]
            y = np.exp(np.exp(u[cidx, 1]) + r[:, 1])
        else:
            x = u[cidx, 0] + r[:, 0]
            y = u[cidx, 1] + r[:, 1]
            if config.scenario == "II":
                y = np.exp(y)
    if config.scenario == "ordinal":
        levels = tuple(str(v) for v in range(1, config.levels + 1))
        kind = ValueKind.ordinal(levels)
        x = np.searchsorted(_ordinal_cuts(config, 0), x).astype(float)
        y = np.searchsorted(_ordinal_cuts(config, 1), y).astype(float)
        return ClusteredDataset(tuple(ids), sizes, x, y, kind, kind)
    return ClusteredDataset(tuple(ids), sizes, x, y)


# ---------------------------------------------------------------------------
# true values


@dataclass(frozen=True)
class TrueValues:
    """Population correlations of a scenario; ``mc_se`` lists Monte Carlo SEs."""

    gamma_t: float
    gamma_b: float
    gamma_w: float
    icc_x: float
    icc_y: float
    mc_se: dict = field(default_factory=dict)

    def target(self, estimator: str) -> float:
        return getattr(self, TARGET[estimator])

    def as_dict(self) -> dict:
        return asdict(self)


def _spearman_from_pmf(P, px=None, py=None) -> float:
    """Spearman (mid-CDF) correlation of two discrete variables with joint pmf ``P``."""
    px = P.sum(1) if px is None else px
    py = P.sum(0) if py is None else py
    fx = np.cumsum(px) - 0.5 * px - 0.5
    fy = np.cumsum(py) - 0.5 * py - 0.5
    return float(fx @ P @ fy / np.sqrt((px @ fx ** 2) * (py @ fy ** 2)))


def _bvn_cell_pmf(mean, cov, cuts_x, cuts_y) -> np.ndarray:
    """Cell probabilities of a bivariate normal over a rectangular grid."""
    sx, sy = np.sqrt(cov[0, 0]), np.sqrt(cov[1, 1])
    big = 40.0
    ex = np.concatenate([[mean[0] - big * sx], cuts_x, [mean[0] + big * sx]])
    ey = np.concatenate([[mean[1] - big * sy], cuts_y, [mean[1] + big * sy]])
    gx, gy = np.meshgrid(ex, ey, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    F = stats.multivariate_normal.cdf(pts, mean=mean, cov=cov, abseps=1e-12,
                                      releps=1e-10).reshape(gx.shape)
    P = F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]
    return np.clip(P, 0.0, None)


def _batch_mean(values, batches=20):
    vals = np.array_split(np.asarray(values, dtype=float), batches)
    means = np.array([v.mean() for v in vals])
    return float(means.mean()), float(means.std(ddof=1) / np.sqrt(batches))


def _rank_corr_batches(x, y, batches=20):
    """Spearman correlation by batch, for a Monte Carlo estimate and its SE."""
    xs, ys = np.array_split(x, batches), np.array_split(y, batches)
    vals = np.array([stats.spearmanr(a, b)[0] for a, b in zip(xs, ys)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(batches))


def true_values(config: ScenarioConfig, mc_size: int | None = None, seed: int = 12345) -> TrueValues:
    """Population total, between- and within-cluster Spearman correlations and rank ICCs.

    Bivariate-normal scenarios use the arcsin identity; Scenario III and the
    ordinal scenarios use exact cell probabilities where available and Monte
    Carlo (``mc_size`` observations, default one million) otherwise.
    """
    rb, rw = config.rho_b, config.rho_w
    mc_size = int(1e6 if mc_size is None else mc_size)
    rng = np.random.default_rng(seed)
    if config.scenario in ("I", "II"):
        icc = float(arcsin_spearman(0.5))
        return TrueValues(float(arcsin_spearman((rb + rw) / 2)), float(arcsin_spearman(rb)),
                          float(arcsin_spearman(rw)), icc, icc)
    if config.scenario == "negpairs":
        icc = float(arcsin_spearman(-0.5))
        return TrueValues(float(arcsin_spearman(rb / 4 + 3 * rw / 4)), float(arcsin_spearman(rb)),
                          float(arcsin_spearman(rw)), icc, icc)
    if config.scenario == "III":
        u = np.asarray(config.mean_u) + _bvn(rng, mc_size, rb)
        r = _bvn(rng, mc_size, rw)
        x = np.exp(u[:, 0]) + r[:, 0]
        y = np.exp(np.exp(u[:, 1]) + r[:, 1])
        gt, se_t = _rank_corr_batches(x, y)
        # rank ICC: two members sharing a cluster effect
        m = mc_size // 2
        u = np.asarray(config.mean_u) + _bvn(rng, m, rb)
        r1, r2 = _bvn(rng, m, rw), _bvn(rng, m, rw)
        ix, se_x = _rank_corr_batches(np.exp(u[:, 0]) + r1[:, 0], np.exp(u[:, 0]) + r2[:, 0])
        iy, se_y = _rank_corr_batches(np.exp(np.exp(u[:, 1]) + r1[:, 1]),
                                      np.exp(np.exp(u[:, 1]) + r2[:, 1]))
        return TrueValues(gt, float(arcsin_spearman(rb)), float(arcsin_spearman(rw)), ix, iy,
                          {"gamma_t": se_t, "icc_x": se_x, "icc_y": se_y})
    # ordinal
    cx, cy = _ordinal_cuts(config, 0), _ordinal_cuts(config, 1)
    mean = np.asarray(config.mean_u)
    gt = _spearman_from_pmf(_bvn_cell_pmf(mean, np.array([[2.0, rb + rw], [rb + rw, 2.0]]), cx, cy))
    # cluster medians are the discretised cluster effects
    gb = _spearman_from_pmf(_bvn_cell_pmf(mean, np.array([[1.0, rb], [rb, 1.0]]), cx, cy))
    pair = np.array([[2.0, 1.0], [1.0, 2.0]])
    ix = _spearman_from_pmf(_bvn_cell_pmf(mean[[0, 0]], pair, cx, cx))
    iy = _spearman_from_pmf(_bvn_cell_pmf(mean[[1, 1]], pair, cy, cy))
    # within: conditional PSRs given the cluster effect, averaged by Monte Carlo
    u = mean + _bvn(rng, mc_size, rb)
    r = _bvn(rng, mc_size, rw)
    psr = []
    for axis, cuts in ((0, cx), (1, cy)):
        code = np.searchsorted(cuts, u[:, axis] + r[:, axis])
        edges = np.concatenate([[-np.inf], cuts, [np.inf]])
        psr.append(special.ndtr(edges[code + 1] - u[:, axis])
                   + special.ndtr(edges[code] - u[:, axis]) - 1.0)
    gw, se_w = _ratio_batches(psr[0] * psr[1], psr[0] ** 2, psr[1] ** 2)
    return TrueValues(gt, gb, gw, ix, iy, {"gamma_w": se_w})


def _ratio_batches(xy, xx, yy, batches=20):
    parts = zip(np.array_split(xy, batches), np.array_split(xx, batches), np.array_split(yy, batches))
    vals = np.array([a.mean() / np.sqrt(b.mean() * c.mean()) for a, b, c in parts])
    full = xy.mean() / np.sqrt(xx.mean() * yy.mean())
    return float(full), float(vals.std(ddof=1) / np.sqrt(batches))


# ---------------------------------------------------------------------------
# study runner


DEFAULT_ESTIMATORS = ("gamma_t", "gamma_w", "gamma_b_median", "gamma_b_approx",
                      "naive_between", "naive_within")


@dataclass
class SimulationReport:
    """Per-estimator summaries of a Monte Carlo study.

    ``rows`` holds one dict per estimator with keys ``estimator, truth,
    mean, bias, emp_se, mdn_se, coverage, n_ok, n_failed``.  ``values``
    keeps the raw per-replicate ``(value, se, lo, hi)`` arrays (NaN when
    unavailable).
    """

    config: ScenarioConfig
    truth: TrueValues
    reps: int
    options: dict
    rows: list
    values: dict = field(repr=False)
    failures: dict
    rank_icc: dict
    notes: list = field(default_factory=list)

    COLUMNS = ("estimator", "truth", "mean", "bias", "emp_se", "mdn_se", "coverage",
               "n_ok", "n_failed")

    def row(self, estimator: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator:
                return r
        raise KeyError(estimator)

    def to_csv(self, stream=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(r[k]) for k in self.COLUMNS})
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "reps": self.reps,
            "options": self.options,
            "truth": self.truth.as_dict(),
            "rows": [{k: _json_num(r[k]) for k in self.COLUMNS} for r in self.rows],
            "rank_icc": {k: _json_num(v) for k, v in self.rank_icc.items()},
            "failures": self.failures,
            "notes": list(self.notes),
        }

    def to_json(self, stream=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if stream is not None:
            stream.write(text)
        return text

    def table(self) -> str:
        """Plain-text summary table."""
        head = f"{'estimator':<16}{'truth':>8}{'bias':>9}{'emp_se':>9}{'mdn_se':>9}{'cover':>8}"
        lines = [self.config.label + f"  reps={self.reps}", head]
        for r in self.rows:
            lines.append(f"{r['estimator']:<16}{r['truth']:>8.3f}{r['bias']:>9.3f}"
                         f"{r['emp_se']:>9.3f}{r['mdn_se']:>9.3f}{r['coverage']:>8.3f}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _json_num(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _replicate(args):
    config, child, estimators, options = args
    rng = np.random.default_rng(child)
    ds = generate(config, rng)
    boot_seed = int(child.generate_state(1)[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = analyze(ds, estimators=estimators, seed=boot_seed, **options)
    out = {}
    for tag in estimators:
        e = res.estimates.get(tag)
        if e is None:
            exc = res.errors.get(tag) or res.errors.get("cpm")
            if exc is None and res.errors:
                exc = next(iter(res.errors.values()))
            out[tag] = type(exc).__name__ if exc is not None else "Missing"
        else:
            lo, hi = e.ci if e.ci is not None else (np.nan, np.nan)
            out[tag] = (e.value, np.nan if e.se is None else e.se, lo, hi)
    icc = res.points
    out["_icc"] = (icc.icc_x.gamma_I if icc.icc_x else np.nan,
                   icc.icc_y.gamma_I if icc.icc_y else np.nan)
    return out


def run_study(config: ScenarioConfig, reps: int, estimators=None, ci: str = "analytic", *,
              link="probit", weights="cluster", psr="cpm", finite_clusters: bool | None = None,
              level: float = 0.95,
              boot_reps: int = 200, t_method: str = "influence", truth: TrueValues | None = None,
              mc_size: int | None = None, n_jobs: int = 1, max_fail: float = 0.10) -> SimulationReport:
    """Run ``reps`` replicates of ``config`` and summarise each estimator.

    Parameters
    ----------
    estimators : iterable of str, optional
        Default: the four model-based estimators plus the naive ones (the
        naive within estimator is dropped for ordinal scenarios).
    finite_clusters : bool, optional
        D correction in ``gamma_b_approx``; default only for ``negpairs``,
        whose clusters are complete two-member populations.
    ci : {"analytic", "bootstrap", "none"}
        Interval method; in analytic mode estimators without an analytic
        route (the naive ones) get no interval and no coverage.
    n_jobs : int
        Worker processes; results do not depend on it.
    max_fail : float
        Largest tolerated fraction of failed replicates per estimator.

    Raises
    ------
    NumericalError
        Some estimator failed in more than ``max_fail`` of the replicates.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if estimators is None:
        estimators = [t for t in DEFAULT_ESTIMATORS
                      if not (t == "naive_within" and config.scenario == "ordinal")]
    estimators = list(estimators)
    truth = true_values(config, mc_size) if truth is None else truth
    if finite_clusters is None:
        finite_clusters = config.scenario == "negpairs"
    options = dict(link=link, weights=weights, psr=psr, finite_clusters=finite_clusters,
                   ci=ci, level=level,
                   boot_reps=boot_reps, t_method=t_method, fallback=(ci != "analytic"))
    children = np.random.SeedSequence(config.seed).spawn(reps)
    jobs = [(config, c, estimators, options) for c in children]
    if n_jobs == 1:
        results = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, reps // (4 * n_jobs))))

    rows, values, failures, notes = [], {}, {}, []
    for tag in estimators:
        census = {}
        arr = np.full((reps, 4), np.nan)
        for i, r in enumerate(results):
            v = r[tag]
            if isinstance(v, str):
                census[v] = census.get(v, 0) + 1
            else:
                arr[i] = v
        n_failed = sum(census.values())
        if n_failed > max_fail * reps:
            raise NumericalError(f"{tag} failed in {n_failed} of {reps} replicates ({census})")
        failures[tag] = census
        values[tag] = arr
        ok = ~np.isnan(arr[:, 0])
        t = truth.target(tag)
        est = arr[ok, 0]
        mean = float(est.mean()) if ok.any() else np.nan
        emp_se = float(est.std(ddof=1)) if ok.sum() > 1 else np.nan
        if ok.sum() == 1:
            notes.append(f"{tag}: empirical SE undefined with a single replicate")
        ses = arr[ok, 1]
        mdn_se = float(np.median(ses)) if ok.any() and not np.all(np.isnan(ses)) else np.nan
        has_ci = ok & ~np.isnan(arr[:, 2])
        coverage = (float(np.mean((arr[has_ci, 2] <= t) & (t <= arr[has_ci, 3])))
                    if has_ci.any() else np.nan)
        rows.append({"estimator": tag, "truth": float(t), "mean": mean, "bias": mean - t,
                     "emp_se": emp_se, "mdn_se": mdn_se, "coverage": coverage,
                     "n_ok": int(ok.sum()), "n_failed": n_failed})
    icc = np.array([r["_icc"] for r in results], dtype=float)
    rank_icc = {"icc_x_mean": float(np.nanmean(icc[:, 0])), "icc_y_mean": float(np.nanmean(icc[:, 1])),
                "icc_x_truth": truth.icc_x, "icc_y_truth": truth.icc_y}
    return SimulationReport(config, truth, reps, {**options, "estimators": estimators},
                            rows, values, failures, rank_icc, notes)


# ---------------------------------------------------------------------------
# key-value configuration files


_CONFIG_KEYS = {
    "scenario": str, "rho_b": float, "rho_w": float, "n": int, "k": str, "cluster_size": str,
    "mean_u": str, "levels": int, "seed": int,
}


def load_config(path_or_text, section: str = "study") -> tuple[ScenarioConfig, dict]:
    """Read a ``key = value`` study file.

    Scenario keys (``scenario, rho_b, rho_w, n, k, mean_u, levels, seed``)
    build the :class:`ScenarioConfig`; everything else is returned as a
    dict of raw strings (e.g. ``reps``, ``link``).  A section header is
    optional.
    """
    text = path_or_text
    if "\n" not in str(path_or_text) and "=" not in str(path_or_text):
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n" + text
    parser = configparser.ConfigParser()
    parser.read_string(text)
    sec = parser[section] if parser.has_section(section) else parser[parser.sections()[0]]
    kwargs, rest = {}, {}
    for key, raw in sec.items():
        key_n = key.replace("-", "_")
        if key_n in _CONFIG_KEYS:
            if key_n in ("k", "cluster_size"):
                kwargs["cluster_size"] = raw.strip()
            elif key_n == "mean_u":
                kwargs["mean_u"] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[key_n] = _CONFIG_KEYS[key_n](raw.strip())
        else:
            rest[key_n] = raw.strip()
    return ScenarioConfig(**kwargs), rest


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)
