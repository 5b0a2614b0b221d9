"""Stopping-rule designers: fixed-sample rules, DP, greedy and threshold rules.

All designers return :class:`~bernstop.trellis.StoppingRule` objects.  Budget
matching to a non-integer mean trial count uses a single fractional node,
exploiting that ``h`` is linear in the continuation probability of one node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .beta_core import BetaParams
from .trellis import (Estimand, NodeId, StoppingRule, _RiskTable, expected_trials,
                      evaluate, n_nodes, node_index)

MAX_DEPTH = 10_000
GREEDY_TIE_TOL = 1e-11

TrialsFn = Callable[[StoppingRule], float]


def default_depth(eta: float) -> int:
    return int(min(max(math.ceil(4.0 * eta), 200), MAX_DEPTH))


# --- fixed-sample rules ---------------------------------------------------

def binomial_rule(n: int, depth: int | None = None, **kwargs) -> StoppingRule:
    """Always take exactly ``n`` trials."""
    depth = n if depth is None else depth
    if n < 0 or n > depth:
        raise ValueError(f"binomial rule needs 0 <= n <= depth, got n={n}, depth={depth}")
    q = np.zeros(n_nodes(depth))
    q[:n_nodes(n - 1) if n > 0 else 0] = 1.0
    kwargs.setdefault("name", f"binomial n={n}")
    return StoppingRule(depth, q, **kwargs)


def negbinomial_rule(l: int, depth: int, **kwargs) -> StoppingRule:
    """Continue until ``l`` successes have been seen, truncated at ``depth``."""
    if l < 1:
        raise ValueError("negative binomial rule needs l >= 1")
    ks, ms = _node_grid(depth)
    q = ((ks < l) & (ms < depth)).astype(float)
    kwargs.setdefault("name", f"negative binomial l={l}")
    return StoppingRule(depth, q, **kwargs)


def negbinomial_depth_for_budget(l: int, eta: float, prior: BetaParams,
                                 max_depth: int = MAX_DEPTH) -> int:
    """Smallest truncation depth whose expected trials reach ``eta``.

    Expected trials grow with the depth, so the depth is located by bisection.
    """
    def h(d):
        return expected_trials(negbinomial_rule(l, d), prior)

    lo, hi = l, l
    while h(hi) < eta:
        lo, hi = hi, min(2 * hi, max_depth)
        if lo == max_depth:
            raise ValueError(f"budget {eta} not reached by depth {max_depth}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if h(mid) < eta:
            lo = mid
        else:
            hi = mid
    # return whichever side is nearer the budget
    return hi if abs(h(hi) - eta) <= abs(h(lo) - eta) else lo


def _node_grid(depth: int) -> tuple[np.ndarray, np.ndarray]:
    ms = np.repeat(np.arange(depth + 1), np.arange(1, depth + 2))
    ks = np.arange(ms.size) - ms * (ms + 1) // 2
    return ks, ms


# --- risk reduction -------------------------------------------------------

def delta_r(k, m, prior: BetaParams, estimand: Estimand | str = Estimand.P):
    """Expected drop in posterior risk from one more trial at node (k, m).

    Vectorized over ``k`` and ``m``.
    """
    estimand = Estimand.parse(estimand)
    k = np.asarray(k, dtype=float)
    m = np.asarray(m, dtype=float)
    a = prior.alpha + k
    b = prior.beta_ + m - k
    s = a + b
    if estimand is Estimand.P:
        out = a * b / (s * s * (s + 1.0) ** 2)
    else:
        out = b / (a * s * s)
    return out if out.ndim else float(out)


def natural_depth(prior: BetaParams, estimand: Estimand, dmin: float) -> int:
    """Depth beyond which no node can clear the threshold ``dmin``.

    For p: ab <= s^2/4 bounds the reduction by 1/(4(s+1)^2).  For log p:
    a >= alpha and b < s bound it by 1/(alpha s).
    """
    a0, s0 = prior.alpha, prior.alpha + prior.beta_
    if estimand is Estimand.P:
        m_max = 1.0 / (2.0 * math.sqrt(dmin)) - 1.0 - s0
    else:
        m_max = 1.0 / (a0 * dmin) - s0
    return max(int(math.floor(m_max)) + 1, 1)


def binomial_optimality_test(m_star: int, prior: BetaParams = BetaParams(1.0, 1.0),
                             estimand: Estimand | str = Estimand.P) -> bool:
    """Whether a threshold can separate row ``m_star`` from row ``m_star + 1``.

    True iff the smallest risk reduction on row ``m_star`` is at least the
    largest on row ``m_star + 1``.  Under a uniform prior that compares the
    edge node ``(0, m_star)`` with the most symmetric node of the next row.
    """
    if m_star < 1:
        raise ValueError("m_star must be at least 1")
    row = delta_r(np.arange(m_star + 1), m_star, prior, estimand)
    nxt = delta_r(np.arange(m_star + 2), m_star + 1, prior, estimand)
    return bool(np.min(row) >= np.max(nxt))


# --- connectivity -------------------------------------------------------------

def connected_support(depth: int, cont: np.ndarray) -> np.ndarray:
    """Restrict a packed continue-mask to nodes reachable from the root."""
    cont = np.asarray(cont, dtype=bool)
    out = np.zeros(n_nodes(depth), dtype=bool)
    reach = np.ones(1, dtype=bool)
    for m in range(depth):
        start = m * (m + 1) // 2
        row = cont[start:start + m + 1] & reach
        if not row.any():
            break
        out[start:start + m + 1] = row
        reach = np.zeros(m + 2, dtype=bool)
        reach[:-1] |= row
        reach[1:] |= row
    return out


# --- threshold rules ------------------------------------------------------

def design_threshold(prior: BetaParams, estimand: Estimand | str, dmin: float,
                     depth: int | None = None) -> StoppingRule:
    """Continue exactly where the one-step risk reduction is at least ``dmin``."""
    estimand = Estimand.parse(estimand)
    if not dmin > 0:
        raise ValueError("dmin must be positive")
    if depth is None:
        depth = min(natural_depth(prior, estimand, dmin), MAX_DEPTH)
    ks, ms = _node_grid(depth)
    cont = (delta_r(ks, ms, prior, estimand) >= dmin) & (ms < depth)
    mask = connected_support(depth, cont)
    return StoppingRule.from_mask(depth, mask, prior=prior, estimand=estimand,
                                  name="threshold", meta={"dmin": float(dmin)})


class ThresholdFamily:
    """Nested threshold rules obtained by lowering the threshold one node at a time.

    Nodes are ranked by decreasing risk reduction (ties by smaller m, then
    smaller k).  Member ``j`` continues on the first ``j`` ranked nodes that
    are reachable, so consecutive members differ in one entry node.
    """

    def __init__(self, prior: BetaParams, estimand: Estimand | str, depth: int):
        self.prior = prior
        self.estimand = Estimand.parse(estimand)
        self.depth = int(depth)
        ks, ms = _node_grid(self.depth)
        inner = ms < self.depth
        self._dr = delta_r(ks, ms, prior, self.estimand)
        idx = np.flatnonzero(inner)
        self.order = idx[np.lexsort((ks[idx], ms[idx], -self._dr[idx]))]
        self.rank = np.full(ks.size, ks.size, dtype=np.int64)
        self.rank[self.order] = np.arange(self.order.size)
        self.size = int(self.order.size)

    def node(self, j: int) -> NodeId:
        i = int(self.order[j])
        m = int((math.isqrt(8 * i + 1) - 1) // 2)
        return NodeId(i - m * (m + 1) // 2, m)

    def threshold(self, j: int) -> float:
        """Risk reduction of the ``j``-th ranked node."""
        return float(self._dr[self.order[j]])

    def member(self, j: int) -> StoppingRule:
        mask = connected_support(self.depth, self.rank < j)
        dmin = self.threshold(j - 1) if j > 0 else math.inf
        return StoppingRule.from_mask(self.depth, mask, prior=self.prior, estimand=self.estimand,
                                      name="threshold", meta={"dmin": dmin})

    def bracket(self, eta: float, trials: TrialsFn | None = None) -> tuple[StoppingRule, StoppingRule]:
        """Adjacent members with ``h(lo) <= eta < h(hi)``."""
        trials = trials or (lambda r: expected_trials(r, self.prior))
        if trials(self.member(self.size)) <= eta:
            raise ValueError(f"budget {eta} not reachable at depth {self.depth}")
        lo, hi = 0, self.size
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if trials(self.member(mid)) <= eta:
                lo = mid
            else:
                hi = mid
        return self.member(lo), self.member(hi)


def threshold_for_budget(prior: BetaParams, estimand: Estimand | str, eta: float,
                         depth: int | None = None, trials: TrialsFn | None = None) -> StoppingRule:
    """Threshold rule with one fractional node whose expected trials equal ``eta``.

    Without an explicit depth the trellis is deepened until it covers the
    natural depth of the matched threshold, so truncation never binds.
    """
    estimand = Estimand.parse(estimand)
    auto = depth is None
    depth = default_depth(eta) if auto else int(depth)
    while True:
        family = ThresholdFamily(prior, estimand, depth)
        lo, hi = family.bracket(eta, trials)
        dmin = hi.meta["dmin"]
        need = natural_depth(prior, estimand, dmin)
        if not auto or need <= depth or depth >= MAX_DEPTH:
            break
        depth = min(need, MAX_DEPTH)
    rule = match_budget(lo, hi, eta, prior=prior, trials=trials)
    return rule.replace(name="threshold", meta={"dmin": dmin, "eta": float(eta)})


# --- budget matching --------------------------------------------------------

def _entry_nodes(lo: StoppingRule, hi: StoppingRule) -> list[NodeId]:
    """Nodes continuing in ``hi`` but not ``lo`` that ``lo`` can reach."""
    a = lo.q > 0
    b = hi.q > 0
    if a.size != b.size:
        raise ValueError("rules must share a depth")
    if np.any(a & ~b):
        raise ValueError("rule_lo must continue on a subset of rule_hi's nodes")
    entries = []
    for i in np.flatnonzero(b & ~a):
        m = int((math.isqrt(8 * int(i) + 1) - 1) // 2)
        k = int(i) - m * (m + 1) // 2
        if m == 0 or lo.get(k, m - 1) > 0 or lo.get(k - 1, m - 1) > 0:
            entries.append(NodeId(k, m))
    return entries


def match_budget(rule_lo: StoppingRule, rule_hi: StoppingRule, eta: float,
                 prior: BetaParams | None = None, trials: TrialsFn | None = None,
                 tol: float = 1e-9) -> StoppingRule:
    """Put a fractional probability on the one node separating two adjacent rules."""
    if trials is None:
        prior = prior or rule_lo.prior
        if prior is None:
            raise ValueError("need a prior or a trials function")
        trials = lambda r: expected_trials(r, prior)  # noqa: E731
    h_lo = trials(rule_lo)
    h_hi = trials(rule_hi)
    if not (h_lo - tol <= eta <= h_hi + tol):
        raise ValueError(f"budget {eta} outside bracket [{h_lo}, {h_hi}]")
    if eta == h_lo:
        return rule_lo
    if eta == h_hi:
        return rule_hi
    entries = _entry_nodes(rule_lo, rule_hi)
    if len(entries) != 1:
        raise ValueError(f"rules are not adjacent: {len(entries)} entry nodes")
    v = entries[0]
    t = min(max((eta - h_lo) / (h_hi - h_lo), 0.0), 1.0)
    out = rule_hi.with_q(v.k, v.m, t)
    got = trials(out)
    if abs(got - eta) > tol * max(1.0, abs(eta)):
        raise ArithmeticError(f"budget match missed: {got} vs {eta}")
    return out


# --- dynamic programming --------------------------------------------------

def design_dp(prior: BetaParams, estimand: Estimand | str, lam: float,
              depth: int) -> StoppingRule:
    """Strategy minimizing ``g + lam * h`` by backward induction.

    Ties between stopping and continuing are resolved in favour of stopping.
    The optimal objective is stored as ``meta['objective']``.
    """
    estimand = Estimand.parse(estimand)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    risk = _RiskTable(prior, estimand, depth)
    total = prior.alpha + prior.beta_
    cont = np.zeros(n_nodes(depth), dtype=bool)
    V = risk(depth, np.arange(depth + 1))
    for m in range(depth - 1, -1, -1):
        ks = np.arange(m + 1)
        s = (prior.alpha + ks) / (total + m)
        f = (prior.beta_ + m - ks) / (total + m)
        value = lam + s * V[1:] + f * V[:-1]
        R = risk(m, ks)
        go = R > value
        start = m * (m + 1) // 2
        cont[start:start + m + 1] = go
        V = np.where(go, value, R)
    mask = connected_support(depth, cont)
    return StoppingRule.from_mask(depth, mask, prior=prior, estimand=estimand, name="dp",
                                  meta={"lambda": float(lam), "objective": float(V[0])})


@dataclass
class DPBracket:
    """Two DP solutions straddling a budget, at Lagrange multipliers ``lam_hi > lam_lo``.

    ``rule_lo`` uses at most ``eta`` trials on average and ``rule_hi`` more.
    Time-sharing between them traces the lower convex hull of (h, g).
    """

    eta: float
    rule_lo: StoppingRule
    rule_hi: StoppingRule
    lam_lo: float
    lam_hi: float
    h_lo: float
    h_hi: float
    g_lo: float
    g_hi: float
    prior: BetaParams = field(repr=False, default=None)

    @property
    def weight(self) -> float:
        if self.h_hi == self.h_lo:
            return 0.0
        return (self.eta - self.h_lo) / (self.h_hi - self.h_lo)

    def risk(self) -> float:
        """Bayes risk of the hull point at ``eta``."""
        t = self.weight
        return (1.0 - t) * self.g_lo + t * self.g_hi

    def matched_rule(self) -> StoppingRule:
        """Single-fractional-node rule with ``h = eta``.

        Nodes are added from ``rule_lo`` toward ``rule_hi`` one entry node at a
        time (by smaller m, then k) and the step crossing ``eta`` is matched.
        """
        if self.h_lo == self.eta:
            return self.rule_lo
        cur = self.rule_lo
        while True:
            entries = _entry_nodes(cur, self.rule_hi)
            if not entries:
                raise ArithmeticError("bracket exhausted without reaching the budget")
            v = min(entries, key=lambda n: (n.m, n.k))
            # v plus whatever of rule_hi becomes reachable through it
            allowed = self.rule_hi.q > 0
            for other in entries:
                if other != v:
                    allowed[node_index(other.k, other.m)] = False
            mask = connected_support(cur.depth, allowed)
            nxt = cur.replace(q=mask.astype(float))
            h_nxt = expected_trials(nxt, self.prior)
            if h_nxt > self.eta:
                return match_budget(cur, nxt, self.eta, prior=self.prior)
            cur = nxt


def dp_bracket(prior: BetaParams, estimand: Estimand | str, eta: float,
               depth: int | None = None, rel_tol: float = 1e-13) -> DPBracket:
    """Bisect the Lagrange multiplier (on a log scale) to bracket budget ``eta``."""
    estimand = Estimand.parse(estimand)
    depth = default_depth(eta) if depth is None else int(depth)
    if eta > depth:
        raise ValueError("budget cannot exceed the depth")
    metrics = {}

    def solve(lam):
        rule = design_dp(prior, estimand, lam, depth)
        res = evaluate(rule, prior, estimand)
        metrics[lam] = (rule, res.expected_trials, res.expected_bayes_risk)
        return res.expected_trials

    # at lam >= prior risk no trial can pay for itself
    hi = float(_RiskTable(prior, estimand, 0)(0, np.zeros(1, dtype=int))[0]) * 1.01
    while solve(hi) > eta:
        hi *= 2.0
    lo = hi
    while solve(lo) <= eta:
        lo *= 1e-2
        if lo < 1e-300:
            raise ValueError(f"budget {eta} not reachable at depth {depth}")
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if mid <= lo or mid >= hi:
            break
        if solve(mid) > eta:
            lo = mid
        else:
            hi = mid
    r_lo, h_lo, g_lo = metrics[hi]
    r_hi, h_hi, g_hi = metrics[lo]
    return DPBracket(eta, r_lo, r_hi, lo, hi, h_lo, h_hi, g_lo, g_hi, prior)


# --- greedy -------------------------------------------------------------

@dataclass
class GreedyPath:
    """Nodes in the order the greedy designer adds them, with (h, g) after each."""

    prior: BetaParams
    estimand: Estimand
    depth: int
    ks: np.ndarray
    ms: np.ndarray
    h: np.ndarray
    g: np.ndarray

    def __len__(self):
        return int(self.ks.size)

    def prefix(self, n: int) -> StoppingRule:
        q = np.zeros(n_nodes(self.depth))
        q[node_index(self.ks[:n], self.ms[:n])] = 1.0
        return StoppingRule(self.depth, q, prior=self.prior, estimand=self.estimand, name="greedy",
                            meta={"nodes": int(n)})

    def count_within(self, eta: float, rel_tol: float = 0.0) -> int:
        """Length of the longest prefix with ``h <= eta``."""
        return int(np.searchsorted(self.h, eta * (1.0 + rel_tol), side="right"))


def greedy_path(prior: BetaParams, estimand: Estimand | str, eta_max: float,
                depth: int | None = None) -> GreedyPath:
    """Run the greedy designer until the expected trials first exceed ``eta_max``."""
    from ._kernels import greedy_kernel

    estimand = Estimand.parse(estimand)
    depth = default_depth(eta_max) if depth is None else int(depth)
    risk = np.empty(n_nodes(depth))
    table = _RiskTable(prior, estimand, depth)
    for m in range(depth + 1):
        start = m * (m + 1) // 2
        risk[start:start + m + 1] = table(m, np.arange(m + 1))
    ks, ms, h, g = greedy_kernel(prior.alpha, prior.beta_, depth, risk, float(eta_max), GREEDY_TIE_TOL)
    return GreedyPath(prior, estimand, depth, ks, ms, h, g)


def design_greedy(prior: BetaParams, estimand: Estimand | str, eta: float,
                  depth: int | None = None) -> StoppingRule:
    """Largest greedy strategy whose expected trials do not exceed ``eta``."""
    if not eta > 0:
        raise ValueError("budget must be positive")
    path = greedy_path(prior, estimand, eta, depth)
    return path.prefix(path.count_within(eta))


# --- configuration front door ----------------------------------------------

DESIGNERS = ("binomial", "negbinomial", "threshold", "dp", "greedy")


@dataclass(frozen=True)
class DesignConfig:
    prior: BetaParams
    estimand: Estimand = Estimand.P
    depth: int | None = None
    lam: float | None = None
    eta: float | None = None
    dmin: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "estimand", Estimand.parse(self.estimand))
        knobs = [x for x in (self.lam, self.eta, self.dmin) if x is not None]
        if len(knobs) != 1:
            raise ValueError("set exactly one of lam, eta, dmin")
        if not knobs[0] > 0:
            raise ValueError("the design knob must be positive")
        if self.depth is not None and self.depth < 1:
            raise ValueError("depth must be positive")
        if self.eta is not None and self.depth is not None and self.eta > self.depth:
            raise ValueError("budget eta cannot exceed depth")


def design(cfg: DesignConfig, method: str) -> StoppingRule:
    """Dispatch a configuration to the named designer."""
    if method == "dp":
        if cfg.lam is not None:
            if cfg.depth is None:
                raise ValueError("dp with lambda needs an explicit depth")
            return design_dp(cfg.prior, cfg.estimand, cfg.lam, cfg.depth)
        if cfg.eta is not None:
            return dp_bracket(cfg.prior, cfg.estimand, cfg.eta, cfg.depth).matched_rule()
    elif method == "greedy":
        if cfg.eta is not None:
            return design_greedy(cfg.prior, cfg.estimand, cfg.eta, cfg.depth)
    elif method == "threshold":
        if cfg.dmin is not None:
            return design_threshold(cfg.prior, cfg.estimand, cfg.dmin, cfg.depth)
        if cfg.eta is not None:
            return threshold_for_budget(cfg.prior, cfg.estimand, cfg.eta, cfg.depth)
    elif method == "binomial":
        if cfg.eta is not None and float(cfg.eta).is_integer():
            n = int(cfg.eta)
            return binomial_rule(n, cfg.depth or n, prior=cfg.prior, estimand=cfg.estimand)
    else:
        raise ValueError(f"unknown designer {method!r}; choose from {', '.join(DESIGNERS)}")
    raise ValueError(f"designer {method!r} cannot use the supplied knob")
