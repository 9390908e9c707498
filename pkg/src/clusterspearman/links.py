"""Link functions for cumulative probability models.

``G`` maps the latent scale onto (0, 1); ``g`` is its inverse.  Each link
supplies the CDF, survival function, density and density derivative, all
returning exact limits at +/-inf, and inverses on both the CDF and the
survival scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = ["LinkFunction", "get_link", "LINKS"]


def _probit_cdf(eta):
    return special.ndtr(eta)


def _probit_sf(eta):
    return special.ndtr(-eta)


def _probit_pdf(eta):
    with np.errstate(over="ignore"):
        return np.exp(-0.5 * eta * eta) / np.sqrt(2.0 * np.pi)


def _probit_dpdf(eta):
    d = _probit_pdf(eta)
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(eta), -eta * d, 0.0)


def _logit_pdf(eta):
    p = special.expit(eta)
    return p * special.expit(-eta)


def _logit_dpdf(eta):
    return _logit_pdf(eta) * (special.expit(-eta) - special.expit(eta))


# cloglog: G(eta) = 1 - exp(-exp(eta))
def _cloglog_cdf(eta):
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(eta))


def _cloglog_sf(eta):
    with np.errstate(over="ignore"):
        return np.exp(-np.exp(eta))


def _cloglog_pdf(eta):
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.exp(eta)
        out = t * np.exp(-t)
    return np.where(np.isnan(out), 0.0, out)


def _cloglog_dpdf(eta):
    with np.errstate(over="ignore", invalid="ignore"):
        out = _cloglog_pdf(eta) * (1.0 - np.exp(eta))
    return np.where(np.isnan(out), 0.0, out)


def _cloglog_quantile(p):
    return np.log(-np.log1p(-p))


def _cloglog_quantile_sf(q):
    return np.log(-np.log(q))


# loglog: G(eta) = exp(-exp(-eta))
def _loglog_cdf(eta):
    with np.errstate(over="ignore"):
        return np.exp(-np.exp(-eta))


def _loglog_sf(eta):
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(-eta))


def _loglog_pdf(eta):
    with np.errstate(over="ignore", invalid="ignore"):
        t = np.exp(-eta)
        out = t * np.exp(-t)
    return np.where(np.isnan(out), 0.0, out)


def _loglog_dpdf(eta):
    with np.errstate(over="ignore", invalid="ignore"):
        out = _loglog_pdf(eta) * (np.exp(-eta) - 1.0)
    return np.where(np.isnan(out), 0.0, out)


def _loglog_quantile(p):
    return -np.log(-np.log(p))


def _loglog_quantile_sf(q):
    return -np.log(-np.log1p(-q))


@dataclass(frozen=True)
class LinkFunction:
    """A link ``g`` with inverse ``G`` (a continuous CDF on the real line)."""

    kind: str

    def __post_init__(self):
        if self.kind not in _TABLE:
            raise ValueError(f"unknown link {self.kind!r}; choose from {sorted(_TABLE)}")

    @property
    def symmetric(self) -> bool:
        return self.kind in ("probit", "logit")

    def cdf(self, eta):
        return _TABLE[self.kind][0](np.asarray(eta, dtype=float))

    def sf(self, eta):
        return _TABLE[self.kind][1](np.asarray(eta, dtype=float))

    def pdf(self, eta):
        return _TABLE[self.kind][2](np.asarray(eta, dtype=float))

    def dpdf(self, eta):
        return _TABLE[self.kind][3](np.asarray(eta, dtype=float))

    def quantile(self, p):
        """The link itself, ``g(p)``."""
        return _TABLE[self.kind][4](np.asarray(p, dtype=float))

    def quantile_sf(self, q):
        """``g(1 - q)``, accurate for small upper-tail probabilities ``q``."""
        return _TABLE[self.kind][5](np.asarray(q, dtype=float))

    def cell(self, upper, lower):
        """``G(upper) - G(lower)`` without cancellation in the upper tail."""
        upper = np.asarray(upper, dtype=float)
        lower = np.asarray(lower, dtype=float)
        right = lower > 0.0
        return np.where(right, self.sf(lower) - self.sf(upper),
                        self.cdf(upper) - self.cdf(lower))

    def __str__(self):
        return self.kind


_TABLE = {
    "probit": (_probit_cdf, _probit_sf, _probit_pdf, _probit_dpdf, special.ndtri,
               lambda q: -special.ndtri(q)),
    "logit": (special.expit, lambda e: special.expit(-e), _logit_pdf, _logit_dpdf, special.logit,
              lambda q: -special.logit(q)),
    "cloglog": (_cloglog_cdf, _cloglog_sf, _cloglog_pdf, _cloglog_dpdf, _cloglog_quantile,
                _cloglog_quantile_sf),
    "loglog": (_loglog_cdf, _loglog_sf, _loglog_pdf, _loglog_dpdf, _loglog_quantile,
               _loglog_quantile_sf),
}

LINKS = tuple(_TABLE)


def get_link(link) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    return LinkFunction(str(link).lower())
