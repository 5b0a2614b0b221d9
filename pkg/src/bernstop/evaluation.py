"""Fixed-p evaluation of stopping rules, prior averaging and Monte-Carlo simulation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import rng
from .beta_core import BetaParams, digamma
from .trellis import Estimand, StoppingRule, n_nodes, node_index, sweep_rows

QUAD_POINTS = 2048


class Estimator(enum.Enum):
    MMSE = "mmse"
    ML = "ml"

    @classmethod
    def parse(cls, value: "str | Estimator") -> "Estimator":
        if isinstance(value, Estimator):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown estimator {value!r}; expected 'mmse' or 'ml'") from None


@dataclass(frozen=True)
class ConditionalMetrics:
    p: float
    expected_trials_given_p: float
    mse_given_p: float
    estimator: Estimator


def _fixed_p(p: np.ndarray):
    def success(m, ks):
        return p
    return success


def _batch(p):
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)):
        raise ValueError("p must lie in [0, 1]")
    return arr, arr.reshape(-1, 1)


def conditional_reach(rule: StoppingRule, p: float) -> np.ndarray:
    """Reach probabilities given the true ``p``, packed over rows ``m <= depth + 1``."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    out = np.zeros(n_nodes(rule.depth + 1))
    for row in sweep_rows(rule, _fixed_p(p)):
        start = node_index(row.lo, row.m)
        out[start:start + row.u.shape[-1]] = row.u
    return out


def conditional_leaves(rule: StoppingRule, p: float) -> dict[tuple[int, int], float]:
    """Stopping distribution over leaves ``(k, m)`` given ``p``."""
    leaves = {}
    for row in sweep_rows(rule, _fixed_p(float(p))):
        mass = row.u * (1.0 - row.q)
        for j in np.flatnonzero(mass > 0.0):
            leaves[(row.lo + int(j), row.m)] = float(mass[j])
    return leaves


def conditional_expected_trials(rule: StoppingRule, p):
    """E[N | p]; vectorized over ``p``."""
    arr, col = _batch(p)
    h = np.zeros(col.shape[0])
    for row in sweep_rows(rule, _fixed_p(col), batch_shape=(col.shape[0],)):
        h += row.m * np.sum(row.u * (1.0 - row.q), axis=-1)
    return h.reshape(arr.shape) if arr.ndim else float(h[0])


def _estimates(rule, m, ks, estimator, estimand, prior):
    if estimator is Estimator.MMSE:
        a = prior.alpha + ks
        s = prior.alpha + prior.beta_ + m
        if estimand is Estimand.P:
            return a / s
        return digamma(a) - digamma(s)
    if m == 0:
        return np.full(ks.shape, np.nan)
    if estimand is Estimand.P:
        return ks / m
    with np.errstate(divide="ignore"):
        return np.log(ks / m)


def conditional_mse(rule: StoppingRule, p, estimator: Estimator | str = Estimator.MMSE,
                    estimand: Estimand | str | None = None, prior: BetaParams | None = None):
    """E[(f(p) - f_hat)^2 | p] with f the identity or log; vectorized over ``p``.

    MMSE estimates use ``prior`` (default: the rule's design prior).  ML
    estimates are k/m and log(k/m); requesting them where a leaf with m = 0
    (or k = 0 for log p) can be reached raises ValueError.
    """
    estimator = Estimator.parse(estimator)
    estimand = Estimand.parse(estimand if estimand is not None else (rule.estimand or Estimand.P))
    prior = prior or rule.prior
    if estimator is Estimator.MMSE and prior is None:
        raise ValueError("MMSE estimation needs a prior")
    arr, col = _batch(p)
    if estimand is Estimand.LOG_P and np.any(col <= 0.0):
        raise ValueError("log p is undefined at p = 0")
    target = col if estimand is Estimand.P else np.log(col)
    mse = np.zeros(col.shape[0])
    for row in sweep_rows(rule, _fixed_p(col), batch_shape=(col.shape[0],)):
        leaf = row.u * (1.0 - row.q)
        if not np.any(leaf > 0.0):
            continue
        ks = np.arange(row.lo, row.lo + leaf.shape[-1])
        est = _estimates(rule, row.m, ks, estimator, estimand, prior)
        bad = ~np.isfinite(est)
        if np.any(bad) and np.any(leaf[:, bad] > 0.0):
            what = "m = 0" if row.m == 0 else "k = 0 under log p"
            raise ValueError(f"ML estimate undefined: rule can stop with {what}")
        err = np.where(bad, 0.0, est) - target
        mse += np.sum(leaf * err * err, axis=-1)
    return mse.reshape(arr.shape) if arr.ndim else float(mse[0])


def conditional_metrics(rule: StoppingRule, p: float, estimator: Estimator | str = Estimator.MMSE,
                        estimand: Estimand | str | None = None,
                        prior: BetaParams | None = None) -> ConditionalMetrics:
    estimator = Estimator.parse(estimator)
    return ConditionalMetrics(float(p), conditional_expected_trials(rule, p),
                              conditional_mse(rule, p, estimator, estimand, prior), estimator)


# --- prior averaging ----------------------------------------------------------

def prior_quadrature(prior: BetaParams, n: int = QUAD_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the Beta density on [0, 1].

    Gauss-Jacobi absorbs the endpoint factors p^(a-1) (1-p)^(b-1), so the
    rule is exact for polynomials of degree < 2n whatever the prior.
    """
    x, w = special.roots_jacobi(n, prior.beta_ - 1.0, prior.alpha - 1.0)
    p = 0.5 * (1.0 + x)
    return p, w / w.sum()


def prior_average(values: Callable[[np.ndarray], np.ndarray], prior: BetaParams,
                  n: int = QUAD_POINTS) -> float:
    p, w = prior_quadrature(prior, n)
    return float(np.dot(w, values(p)))


# --- Monte Carlo --------------------------------------------------------------

def _block_steps(n: int) -> int:
    # uniforms buffered per stream: two per step, kept to a few tens of MB
    steps = (1 << 22) // max(n, 1)
    steps = max(8, min(256, steps))
    return steps - steps % 2


def simulate_lockstep(rule: StoppingRule, p, seed: int, streams: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Run the stopping process for many independent streams at once.

    Stream ``i`` draws uniforms in pairs per step from its own generator:
    the first decides continuation (continue iff it is below q), the second
    the trial outcome (success iff it is below p).  Results per stream are
    therefore identical to running it alone.
    """
    streams = np.asarray(streams, dtype=np.uint64).ravel()
    n = streams.size
    p = np.broadcast_to(np.asarray(p, dtype=float), (n,)).copy()
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("p must lie in [0, 1]")
    seed = rng.check_seed(seed)
    k = np.zeros(n, dtype=np.int64)
    m = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    steps = _block_steps(n)
    buf = np.empty((n, 2 * steps))
    for t in range(rule.depth + 1):
        j = t % steps
        if j == 0:
            counter = (t // steps) * (2 * steps // 4)
            for i in np.flatnonzero(active):
                key = (int(streams[i]) << 64) | seed
                gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
                buf[i] = gen.random(2 * steps)
        ia = np.flatnonzero(active)
        q = rule.q[node_index(k[ia], t)]
        go = buf[ia, 2 * j] < q
        stop = ia[~go]
        m[stop] = t
        active[stop] = False
        cont = ia[go]
        k[cont] += buf[cont, 2 * j + 1] < p[cont]
        if cont.size == 0:
            break
    return k, m


def simulate_stop(rule: StoppingRule, p: float, seed: int, stream: int = 0) -> tuple[int, int]:
    """One realization of the stopping process; deterministic given ``(seed, stream)``."""
    k, m = simulate_lockstep(rule, p, seed, [stream])
    return int(k[0]), int(m[0])


def simulate_many(rule: StoppingRule, p: float, seed: int, n: int,
                  chunk: int = 1 << 16) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent realizations using streams ``0 .. n-1``.

    Streams are simulated ``chunk`` at a time to keep the uniform buffers
    long; the result does not depend on ``chunk``.
    """
    k = np.empty(n, dtype=np.int64)
    m = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        k[start:stop], m[start:stop] = simulate_lockstep(rule, p, seed, np.arange(start, stop))
    return k, m


# --- budget sweeps ------------------------------------------------------------

@dataclass(frozen=True)
class Population:
    """Parameters to average over: a finite weighted set or a Beta prior."""

    p: np.ndarray
    weights: np.ndarray
    label: str

    @classmethod
    def from_values(cls, values, label: str = "scene") -> "Population":
        uniq, counts = np.unique(np.asarray(values, dtype=float).ravel(), return_counts=True)
        return cls(uniq, counts / counts.sum(), label)

    @classmethod
    def from_prior(cls, prior: BetaParams, n: int = QUAD_POINTS) -> "Population":
        p, w = prior_quadrature(prior, n)
        return cls(p, w, f"beta({prior.alpha!r},{prior.beta_!r})")

    def mean(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))

    def trials(self, rule: StoppingRule) -> float:
        return self.mean(conditional_expected_trials(rule, self.p))

    def mse(self, rule: StoppingRule, estimator=Estimator.MMSE, estimand=Estimand.P, prior=None) -> float:
        return self.mean(conditional_mse(rule, self.p, estimator, estimand, prior))

    def mean_spread(self) -> float:
        return self.mean(np.sqrt(self.p * (1.0 - self.p)))


def oracle_mse(population: Population, eta: float) -> float:
    """Average MSE of oracle-aided binomial sampling with mean budget ``eta``."""
    return population.mean_spread() ** 2 / eta


def mse_vs_budget_sweep(population: Population, prior: BetaParams, budgets: Sequence[float],
                        methods: Sequence[str] = ("binomial", "threshold", "oracle"),
                        estimator: Estimator | str = Estimator.MMSE) -> list[dict]:
    """MSE against mean trial budget for binomial, threshold and oracle allocation.

    The threshold rule is designed under ``prior`` and its fractional node is
    set so the population-average expected trials equal the budget.  A
    non-integer binomial budget time-shares between the neighbouring sample
    sizes.  The oracle row is the closed form for optimal real-valued
    allocations with unbiased estimates.
    """
    from .designers import binomial_rule, threshold_for_budget

    estimator = Estimator.parse(estimator)
    rows = []
    for eta in budgets:
        eta = float(eta)
        for method in methods:
            if method == "binomial":
                lo = int(math.floor(eta))
                hi = lo if lo == eta else lo + 1
                t = eta - lo
                mse = 0.0
                for n, wt in ((lo, 1.0 - t), (hi, t)):
                    if wt > 0.0:
                        rule = binomial_rule(n, prior=prior, estimand=Estimand.P)
                        mse += wt * population.mse(rule, estimator, Estimand.P, prior)
                trials = eta
            elif method == "threshold":
                rule = threshold_for_budget(prior, Estimand.P, eta, trials=population.trials)
                mse = population.mse(rule, estimator, Estimand.P, prior)
                trials = population.trials(rule)
            elif method == "oracle":
                mse = oracle_mse(population, eta)
                trials = eta
            else:
                raise ValueError(f"unknown method {method!r}")
            rows.append({"method": method, "eta": eta, "expected_trials": float(trials), "mse": float(mse)})
    return rows
