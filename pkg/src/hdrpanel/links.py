"""Link functions for distribution regression: logit and probit.

Each link exposes the CDF, its first three derivatives and the inverse
(quantile) function. Probabilities are clamped away from {0, 1} inside
likelihood computations to keep logs finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr, ndtri

PROB_CLIP = 1e-12

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _logit_derivs(s, order):
    lam = expit(s)
    if order == 0:
        return lam
    d1 = lam * (1.0 - lam)
    if order == 1:
        return d1
    if order == 2:
        return d1 * (1.0 - 2.0 * lam)
    if order == 3:
        return d1 * (1.0 - 6.0 * lam + 6.0 * lam * lam)
    raise ValueError(f"derivative order must be in 0..3, got {order}")


def _probit_derivs(s, order):
    if order == 0:
        return ndtr(s)
    phi = np.exp(-0.5 * np.asarray(s, dtype=float) ** 2) / _SQRT_2PI
    if order == 1:
        return phi
    if order == 2:
        return -s * phi
    if order == 3:
        return (np.asarray(s, dtype=float) ** 2 - 1.0) * phi
    raise ValueError(f"derivative order must be in 0..3, got {order}")


@dataclass(frozen=True)
class LinkFunction:
    """A strictly increasing CDF link with derivatives up to order three."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("logit", "probit"):
            raise ValueError(f"unknown link kind {self.kind!r}")

    @property
    def link_id(self) -> int:
        # numeric id consumed by the compiled kernels
        return 0 if self.kind == "logit" else 1

    def eval(self, order: int, s):
        """Evaluate the link derivative of the given order (0 = CDF) at s."""
        if self.kind == "logit":
            return _logit_derivs(s, order)
        return _probit_derivs(s, order)

    def cdf(self, s):
        return self.eval(0, s)

    def pdf(self, s):
        return self.eval(1, s)

    def inverse(self, p):
        """Quantile function; p must lie strictly inside (0, 1)."""
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValueError("inverse link requires p in the open interval (0, 1)")
        if self.kind == "logit":
            return np.log(p) - np.log1p(-p)
        return ndtri(p)

    def log_cdf(self, s):
        if self.kind == "logit":
            # -softplus(-s)
            return -np.logaddexp(0.0, -np.asarray(s, dtype=float))
        return log_ndtr(s)

    def log_sf(self, s):
        if self.kind == "logit":
            return -np.logaddexp(0.0, np.asarray(s, dtype=float))
        return log_ndtr(-np.asarray(s, dtype=float))


def get_link(kind) -> LinkFunction:
    """Resolve a link from a config string or pass through a LinkFunction."""
    if isinstance(kind, LinkFunction):
        return kind
    return LinkFunction(str(kind).lower())


def clip_prob(p):
    """Clamp probabilities to [PROB_CLIP, 1 - PROB_CLIP]."""
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
