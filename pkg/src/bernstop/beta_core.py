"""Beta-distribution arithmetic for Bernoulli parameter estimation.

Conjugate updates, posterior moments of ``p`` and of ``log p``, and the
digamma/trigamma functions those moments need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this argument the polygammas are shifted upward by recurrence
# before the asymptotic series is applied.
_ASYMPTOTIC_FROM = 10.0

# Bernoulli numbers B_2, B_4, ..., B_16.
_BERNOULLI_EVEN = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)


@dataclass(frozen=True)
class BetaParams:
    """Beta(alpha, beta_) prior or posterior over a Bernoulli parameter."""

    alpha: float
    beta_: float

    def __post_init__(self):
        a, b = float(self.alpha), float(self.beta_)
        if not (a > 0.0 and b > 0.0) or not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError(f"Beta parameters must be positive and finite, got ({a}, {b})")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta_", b)

    def posterior_after(self, k: int, m: int) -> "BetaParams":
        """Posterior after observing ``k`` successes in ``m`` trials."""
        if not 0 <= k <= m:
            raise ValueError(f"need 0 <= k <= m, got k={k}, m={m}")
        return BetaParams(self.alpha + k, self.beta_ + m - k)

    @property
    def total(self) -> float:
        return self.alpha + self.beta_

    def as_tuple(self) -> tuple[float, float]:
        return (self.alpha, self.beta_)


def beta_mean(prior: BetaParams) -> float:
    return prior.alpha / (prior.alpha + prior.beta_)


def beta_variance(prior: BetaParams) -> float:
    """Variance of Beta(a, b); the Bayes risk of the posterior-mean estimate of p."""
    a, b = prior.alpha, prior.beta_
    s = a + b
    return a * b / (s * s * (s + 1.0))


def _as_positive_array(x):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0.0)):
        raise ValueError("polygamma functions are only defined here for x > 0")
    return arr


def digamma(x):
    """Digamma function psi(x) for x > 0 (scalar or array)."""
    arr = _as_positive_array(x)
    z = np.array(arr, dtype=float, copy=True)
    acc = np.zeros_like(z)
    small = z < _ASYMPTOTIC_FROM
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    power = inv2.copy()
    for n, b2n in enumerate(_BERNOULLI_EVEN, start=1):
        series += b2n / (2 * n) * power
        power = power * inv2
    out = acc + np.log(z) - 0.5 / z - series
    return out if np.ndim(x) else float(out)


def trigamma(x):
    """Trigamma function psi'(x) for x > 0 (scalar or array)."""
    arr = _as_positive_array(x)
    z = np.array(arr, dtype=float, copy=True)
    acc = np.zeros_like(z)
    small = z < _ASYMPTOTIC_FROM
    while np.any(small):
        acc[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < _ASYMPTOTIC_FROM
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    power = inv2 * inv
    for b2n in _BERNOULLI_EVEN:
        series += b2n * power
        power = power * inv2
    out = acc + inv + 0.5 * inv2 + series
    return out if np.ndim(x) else float(out)


def logp_posterior_mean(post: BetaParams) -> float:
    """E[log P] under Beta(a, b): psi(a) - psi(a + b)."""
    return digamma(post.alpha) - digamma(post.alpha + post.beta_)


def logp_posterior_var(post: BetaParams) -> float:
    """Var[log P] under Beta(a, b): psi'(a) - psi'(a + b)."""
    return trigamma(post.alpha) - trigamma(post.alpha + post.beta_)
