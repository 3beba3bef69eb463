"""
Negative-binomial and beta-binomial log-pmfs and samplers.

Parameterisations:

- NB: variance = mu + overdisp * mu**2, i.e. size theta = 1 / overdisp.
- BB: alpha = p / overdisp, beta = (1 - p) / overdisp, so the intra-class
  correlation is overdisp / (1 + overdisp).

Everything is evaluated in the log domain via log-gamma / log-beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, expit, gammaln

from .errors import DomainError


def _positive_finite(name: str, value) -> None:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")


def _counts(name: str, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
            raise DomainError(f"{name} must be integer-valued, got {value!r}")
    elif arr.dtype.kind not in "iu":
        raise DomainError(f"{name} must be integer-valued, got {value!r}")
    if np.any(arr < 0):
        raise DomainError(f"{name} must be >= 0, got {value!r}")
    return arr.astype(float)


@dataclass(frozen=True)
class NBParams:
    mu: float
    overdisp: float

    def __post_init__(self):
        _positive_finite("mu", self.mu)
        _positive_finite("overdisp", self.overdisp)

    @property
    def size(self) -> float:
        return 1.0 / self.overdisp

    @property
    def variance(self) -> float:
        return self.mu + self.overdisp * self.mu**2


@dataclass(frozen=True)
class BBParams:
    p: float
    overdisp: float

    def __post_init__(self):
        p = float(self.p)
        if not np.isfinite(p) or not 0.0 < p < 1.0:
            raise DomainError(f"p must lie in (0, 1), got {self.p!r}")
        _positive_finite("overdisp", self.overdisp)

    @property
    def alpha(self) -> float:
        return self.p / self.overdisp

    @property
    def beta(self) -> float:
        return (1.0 - self.p) / self.overdisp

    @property
    def icc(self) -> float:
        return self.overdisp / (1.0 + self.overdisp)


def nb_logpmf_terms(y, log_mu, overdisp: float) -> np.ndarray:
    """
    Element-wise NB log-pmf from the log mean.

    Works from log(mu) so huge or tiny means never overflow:
    log(1 + mu/theta) is a softplus of log(mu) - log(theta).
    No validation; callers own their inputs.
    """
    y = np.asarray(y, dtype=float)
    log_mu = np.asarray(log_mu, dtype=float)
    theta = 1.0 / overdisp
    log_theta = np.log(theta)
    diff = log_mu - log_theta
    softplus = np.logaddexp(0.0, diff)
    return (
        gammaln(y + theta)
        - gammaln(theta)
        - gammaln(y + 1.0)
        - theta * softplus
        + y * (diff - softplus)
    )


def bb_logpmf_terms(n1, n, logit_p, overdisp: float) -> np.ndarray:
    """
    Element-wise BB log-pmf from the logit of p.

    alpha/beta come from expit(+l) and expit(-l) separately so neither
    rounds to zero for large |l|.
    """
    n1 = np.asarray(n1, dtype=float)
    n = np.asarray(n, dtype=float)
    logit_p = np.asarray(logit_p, dtype=float)
    alpha = expit(logit_p) / overdisp
    beta = expit(-logit_p) / overdisp
    log_choose = gammaln(n + 1.0) - gammaln(n1 + 1.0) - gammaln(n - n1 + 1.0)
    return log_choose + betaln(n1 + alpha, n - n1 + beta) - betaln(alpha, beta)


def nb_logpmf(y, params: NBParams):
    y = _counts("y", y)
    out = nb_logpmf_terms(y, np.log(params.mu), params.overdisp)
    return float(out) if out.ndim == 0 else out


def bb_logpmf(n1, n, params: BBParams):
    n1 = _counts("n1", n1)
    n = _counts("n", n)
    if np.any(n1 > n):
        raise DomainError(f"n1 must not exceed n (n1={n1!r}, n={n!r})")
    p = float(params.p)
    alpha = p / params.overdisp
    beta = (1.0 - p) / params.overdisp
    log_choose = gammaln(n + 1.0) - gammaln(n1 + 1.0) - gammaln(n - n1 + 1.0)
    out = log_choose + betaln(n1 + alpha, n - n1 + beta) - betaln(alpha, beta)
    return float(out) if np.ndim(out) == 0 else out


def nb_sample(params: NBParams, rng: np.random.Generator, size=None):
    theta = params.size
    prob = theta / (theta + params.mu)
    return rng.negative_binomial(theta, prob, size=size)


def bb_sample(n, params: BBParams, rng: np.random.Generator, size=None):
    if size is None and int(n) == 0:
        return 0
    p = rng.beta(params.alpha, params.beta, size=size)
    p = np.clip(np.nan_to_num(p, nan=params.p), 0.0, 1.0)
    return rng.binomial(n, p)


def nb_sample_array(log_mu, overdisp: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised NB draws for per-sample means."""
    theta = 1.0 / overdisp
    prob = expit(np.log(theta) - np.asarray(log_mu, dtype=float))
    return rng.negative_binomial(theta, prob)


def bb_sample_array(n, logit_p, overdisp: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised BB draws for per-sample trial counts and logits."""
    n = np.asarray(n)
    logit_p = np.asarray(logit_p, dtype=float)
    mean = expit(logit_p)
    p = rng.beta(mean / overdisp, expit(-logit_p) / overdisp)
    p = np.clip(np.where(np.isnan(p), mean, p), 0.0, 1.0)
    return rng.binomial(n, p)
