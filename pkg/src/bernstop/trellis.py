"""Stopping rules on the (successes, trials) trellis and their exact evaluation.

A rule assigns a continuation probability ``q[k, m]`` to every node of the
complete trellis of depth ``d``.  Values are held in a packed lower-triangular
array: row ``m`` occupies ``[m(m+1)/2, m(m+1)/2 + m]``.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .beta_core import BetaParams, digamma, trigamma

RULE_FORMAT_VERSION = 1
_RULE_MAGIC = "bernstop-rule"


class Estimand(enum.Enum):
    P = "p"
    LOG_P = "logp"

    @classmethod
    def parse(cls, value: "str | Estimand") -> "Estimand":
        if isinstance(value, Estimand):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key in (member.value, member.name.lower().replace("_", "")):
                return member
        raise ValueError(f"unknown estimand {value!r}; expected 'p' or 'logp'")


class NodeId(NamedTuple):
    k: int
    m: int


def node_index(k, m):
    """Packed index of node (k, m); works elementwise on arrays."""
    return m * (m + 1) // 2 + k


def n_nodes(depth: int) -> int:
    return (depth + 1) * (depth + 2) // 2


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """Continuation probabilities on a depth-``depth`` trellis.

    ``prior`` and ``estimand`` record the design context (used by MMSE
    estimation and by the rule file format); they do not affect evaluation.
    """

    depth: int
    q: np.ndarray
    prior: BetaParams | None = None
    estimand: Estimand | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = int(self.depth)
        if d < 0:
            raise ValueError("depth must be non-negative")
        q = np.array(self.q, dtype=float)
        if q.shape != (n_nodes(d),):
            raise ValueError(f"q must have {n_nodes(d)} entries for depth {d}, got {q.shape}")
        if np.any((q < 0.0) | (q > 1.0)) or not np.all(np.isfinite(q)):
            raise ValueError("continuation probabilities must lie in [0, 1]")
        q.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_nodes(cls, depth: int, nodes, **kwargs) -> "StoppingRule":
        """Build from an iterable of ``(k, m, q)`` triples; absent nodes stop."""
        q = np.zeros(n_nodes(depth))
        for k, m, value in nodes:
            if not (0 <= k <= m <= depth):
                raise ValueError(f"node ({k}, {m}) outside depth-{depth} trellis")
            q[node_index(k, m)] = value
        return cls(depth, q, **kwargs)

    @classmethod
    def from_mask(cls, depth: int, mask: np.ndarray, **kwargs) -> "StoppingRule":
        return cls(depth, np.asarray(mask, dtype=float), **kwargs)

    def row(self, m: int) -> np.ndarray:
        start = m * (m + 1) // 2
        return self.q[start:start + m + 1]

    def get(self, k: int, m: int) -> float:
        if not (0 <= k <= m <= self.depth):
            return 0.0
        return float(self.q[node_index(k, m)])

    def continuing_nodes(self) -> list[NodeId]:
        idx = np.flatnonzero(self.q > 0.0)
        m = _row_of(idx)
        return [NodeId(int(i - mm * (mm + 1) // 2), int(mm)) for i, mm in zip(idx, m)]

    def fractional_nodes(self) -> list[NodeId]:
        return [v for v in self.continuing_nodes() if self.get(*v) < 1.0]

    def with_q(self, k: int, m: int, value: float, **changes) -> "StoppingRule":
        q = self.q.copy()
        q[node_index(k, m)] = value
        return self.replace(q=q, **changes)

    def replace(self, **changes) -> "StoppingRule":
        fields = dict(depth=self.depth, q=self.q, prior=self.prior,
                      estimand=self.estimand, name=self.name, meta=dict(self.meta))
        fields.update(changes)
        return StoppingRule(**fields)

    def last_active_row(self) -> int:
        """Largest m with a continuing node, or -1 for the stop-at-root rule."""
        idx = np.flatnonzero(self.q)
        return -1 if idx.size == 0 else int(_row_of(idx[-1:])[0])

    def same_support(self, other: "StoppingRule") -> bool:
        a, b = self.q, other.q
        n = max(a.size, b.size)
        a = np.pad(a, (0, n - a.size))
        b = np.pad(b, (0, n - b.size))
        return bool(np.array_equal(a, b))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"StoppingRule{label}(depth={self.depth}, continuing={int(np.count_nonzero(self.q))})"


def _row_of(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    m = ((np.sqrt(8.0 * idx + 1.0) - 1.0) // 2).astype(np.int64)
    # float rounding can be off by one for large indices
    m = np.where(m * (m + 1) // 2 > idx, m - 1, m)
    m = np.where((m + 1) * (m + 2) // 2 <= idx, m + 1, m)
    return m


def stop_risk_row(prior: BetaParams, estimand: Estimand, m: int, ks: np.ndarray) -> np.ndarray:
    """Posterior risk of the MMSE estimate at nodes ``(ks, m)``."""
    a = prior.alpha + ks
    b = prior.beta_ + m - ks
    if estimand is Estimand.P:
        s = a + b
        return a * b / (s * s * (s + 1.0))
    return trigamma(a) - trigamma(prior.alpha + prior.beta_ + m)


def mmse_estimate_row(prior: BetaParams, estimand: Estimand, m: int, ks: np.ndarray) -> np.ndarray:
    a = prior.alpha + ks
    if estimand is Estimand.P:
        return a / (prior.alpha + prior.beta_ + m)
    return digamma(a) - digamma(prior.alpha + prior.beta_ + m)


class _RiskTable:
    """Stop-risk lookup with the trigamma terms precomputed once per depth."""

    def __init__(self, prior: BetaParams, estimand: Estimand, depth: int):
        self.prior = prior
        self.estimand = estimand
        if estimand is Estimand.LOG_P:
            j = np.arange(depth + 2, dtype=float)
            self._tri_a = trigamma(prior.alpha + j)
            self._tri_s = trigamma(prior.alpha + prior.beta_ + j)

    def __call__(self, m: int, ks: np.ndarray) -> np.ndarray:
        if self.estimand is Estimand.P:
            return stop_risk_row(self.prior, Estimand.P, m, ks)
        return self._tri_a[ks] - self._tri_s[m]


class _Row(NamedTuple):
    m: int
    lo: int
    u: np.ndarray   # reach probabilities for k = lo .. lo + width - 1 (last axis)
    q: np.ndarray


def sweep_rows(rule: StoppingRule,
               success: Callable[[int, np.ndarray], np.ndarray],
               batch_shape: tuple = ()) -> Iterator[_Row]:
    """Forward reach recursion, yielding only the window of nonzero mass per row.

    ``success(m, ks)`` gives the probability that the next trial succeeds at
    nodes ``(ks, m)``; it may broadcast against ``batch_shape + (len(ks),)``.
    """
    lo = 0
    u = np.ones(batch_shape + (1,))
    for m in range(rule.depth + 1):
        width = u.shape[-1]
        q = rule.row(m)[lo:lo + width]
        yield _Row(m, lo, u, q)
        c = u * q
        alive = np.flatnonzero(c.reshape(-1, width).any(axis=0))
        if alive.size == 0:
            return
        a, b = int(alive[0]), int(alive[-1]) + 1
        c = c[..., a:b]
        ks = np.arange(lo + a, lo + b)
        s = success(m, ks)
        nxt = np.zeros(batch_shape + (b - a + 1,))
        nxt[..., 1:] += c * s
        nxt[..., :-1] += c * (1.0 - s)
        lo += a
        u = nxt


def beta_predictive(prior: BetaParams) -> Callable[[int, np.ndarray], np.ndarray]:
    total = prior.alpha + prior.beta_

    def success(m, ks):
        return (prior.alpha + ks) / (total + m)

    return success


def reach_probabilities(rule: StoppingRule, prior: BetaParams) -> np.ndarray:
    """Probability of reaching each node, packed over rows ``m <= depth + 1``."""
    out = np.zeros(n_nodes(rule.depth + 1))
    # row depth + 1 stays zero: the final row never continues
    for row in sweep_rows(rule, beta_predictive(prior)):
        start = node_index(row.lo, row.m)
        out[start:start + row.u.shape[-1]] = row.u
    return out


@dataclass(frozen=True)
class RuleMetrics:
    expected_trials: float
    expected_bayes_risk: float
    estimand: Estimand


def evaluate(rule: StoppingRule, prior: BetaParams, estimand: Estimand | str = Estimand.P) -> RuleMetrics:
    """Expected trials and expected Bayes risk of ``rule`` under ``prior``."""
    estimand = Estimand.parse(estimand)
    risk = _RiskTable(prior, estimand, rule.depth)
    h = 0.0
    g = 0.0
    for row in sweep_rows(rule, beta_predictive(prior)):
        leaf = row.u * (1.0 - row.q)
        ks = np.arange(row.lo, row.lo + leaf.size)
        h += row.m * leaf.sum()
        g += float(np.dot(leaf, risk(row.m, ks)))
    return RuleMetrics(float(h), float(g), estimand)


def expected_trials(rule: StoppingRule, prior: BetaParams) -> float:
    h = 0.0
    for row in sweep_rows(rule, beta_predictive(prior)):
        h += row.m * float(np.sum(row.u * (1.0 - row.q)))
    return h


def expected_bayes_risk(rule: StoppingRule, prior: BetaParams, estimand: Estimand | str = Estimand.P) -> float:
    return evaluate(rule, prior, estimand).expected_bayes_risk


def validate(rule: StoppingRule) -> str | None:
    """Return a description of the first violated strategy invariant, or None."""
    d = rule.depth
    if np.any(rule.row(d) != 0.0):
        k = int(np.flatnonzero(rule.row(d))[0])
        return f"depth truncation: node ({k}, {d}) continues at the final row"
    frac = rule.fractional_nodes()
    if len(frac) > 1:
        listed = ", ".join(f"({v.k}, {v.m})" for v in frac[:4])
        return f"multiplexing: {len(frac)} fractional nodes ({listed}); at most one allowed"
    # every continuing node other than the root needs a continuing parent
    prev = rule.row(0) > 0.0
    for m in range(1, d):
        cur = rule.row(m) > 0.0
        if not cur.any():
            if rule.last_active_row() > m:
                nxt = rule.last_active_row()
                return f"disconnected: row {m} has no continuing node but row {nxt} does"
            break
        fed = np.zeros(m + 1, dtype=bool)
        fed[1:] |= prev
        fed[:-1] |= prev
        orphan = cur & ~fed
        if orphan.any():
            k = int(np.flatnonzero(orphan)[0])
            return f"disconnected: node ({k}, {m}) continues but no parent continues"
        prev = cur
    return None


def check(rule: StoppingRule) -> StoppingRule:
    problem = validate(rule)
    if problem:
        raise ValueError(problem)
    return rule


# --- rule files -----------------------------------------------------------

def dumps_rule(rule: StoppingRule) -> str:
    """Serialize to the versioned text format (sparse list of q > 0 nodes)."""
    buf = io.StringIO()
    buf.write(f"{_RULE_MAGIC} {RULE_FORMAT_VERSION}\n")
    buf.write(f"depth {rule.depth}\n")
    if rule.prior is not None:
        buf.write(f"prior {rule.prior.alpha!r} {rule.prior.beta_!r}\n")
    if rule.estimand is not None:
        buf.write(f"estimand {rule.estimand.value}\n")
    if rule.name:
        buf.write(f"name {rule.name}\n")
    for key in sorted(rule.meta):
        value = rule.meta[key]
        if isinstance(value, float):
            value = repr(value)
        buf.write(f"meta {key} {value}\n")
    nodes = rule.continuing_nodes()
    buf.write(f"nodes {len(nodes)}\n")
    for k, m in nodes:
        buf.write(f"{k} {m} {rule.get(k, m)!r}\n")
    return buf.getvalue()


def loads_rule(text: str) -> StoppingRule:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty rule file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _RULE_MAGIC:
        raise ValueError("not a bernstop rule file")
    if int(head[1]) != RULE_FORMAT_VERSION:
        raise ValueError(f"unsupported rule format version {head[1]}")
    depth = None
    prior = None
    estimand = None
    name = ""
    meta = {}
    count = None
    i = 1
    while i < len(lines):
        parts = lines[i].split(maxsplit=2)
        key = parts[0]
        i += 1
        if key == "depth":
            depth = int(parts[1])
        elif key == "prior":
            a, b = lines[i - 1].split()[1:3]
            prior = BetaParams(float(a), float(b))
        elif key == "estimand":
            estimand = Estimand.parse(parts[1])
        elif key == "name":
            name = lines[i - 1][len("name"):].strip()
        elif key == "meta":
            meta[parts[1]] = _parse_meta(parts[2] if len(parts) > 2 else "")
        elif key == "nodes":
            count = int(parts[1])
            break
        else:
            raise ValueError(f"unexpected line in rule header: {lines[i - 1]!r}")
    if depth is None or count is None:
        raise ValueError("rule file lacks depth or nodes section")
    body = lines[i:]
    if len(body) != count:
        raise ValueError(f"rule file declares {count} nodes but lists {len(body)}")
    nodes = []
    for ln in body:
        k, m, value = ln.split()
        nodes.append((int(k), int(m), float(value)))
    return StoppingRule.from_nodes(depth, nodes, prior=prior, estimand=estimand, name=name, meta=meta)


def _parse_meta(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def save_rule(rule: StoppingRule, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_rule(rule))


def load_rule(path) -> StoppingRule:
    with open(path, encoding="utf-8") as fh:
        return loads_rule(fh.read())
