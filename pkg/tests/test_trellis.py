import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import special, stats

from bernstop.beta_core import BetaParams
from bernstop.trellis import (Estimand, NodeId, StoppingRule, check, dumps_rule, evaluate, expected_bayes_risk,
                              expected_trials, load_rule, loads_rule, n_nodes, node_index, reach_probabilities,
                              save_rule, validate)


def path_oracle(rule, prior, estimand):
    """h and g by walking every outcome sequence separately (no trellis merging).

    The probability of a particular sequence with k successes in m trials under
    the prior is B(a + k, b + m - k) / B(a, b).
    """
    a, b = prior.alpha, prior.beta_
    lb0 = special.betaln(a, b)

    def risk(k, m):
        if estimand is Estimand.P:
            return stats.beta(a + k, b + m - k).var()
        return special.polygamma(1, a + k) - special.polygamma(1, a + b + m)

    h = g = 0.0
    stack = [(0, 0, 1.0)]       # (k, m, product of continuation probabilities)
    while stack:
        k, m, w = stack.pop()
        seq = math.exp(special.betaln(a + k, b + m - k) - lb0)
        q = rule.get(k, m) if m < rule.depth else 0.0
        stop = w * (1.0 - q) * seq
        h += m * stop
        g += risk(k, m) * stop
        if q > 0.0:
            # push both outcomes; sequences are distinct even when counts agree
            stack.append((k + 1, m + 1, w * q))
            stack.append((k, m + 1, w * q))
    return h, g


def random_rule(rng, depth, frac=0.3):
    q = rng.random(n_nodes(depth))
    q = np.where(q < 0.4, 0.0, np.where(q > 1 - frac, rng.random(q.size), 1.0))
    q[node_index(np.arange(depth + 1), depth)] = 0.0
    return StoppingRule(depth, q)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("estimand", list(Estimand))
def test_evaluate_matches_path_enumeration(seed, estimand):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 11))
    prior = BetaParams(*rng.uniform(0.3, 6.0, 2))
    rule = random_rule(rng, depth)
    want_h, want_g = path_oracle(rule, prior, estimand)
    got = evaluate(rule, prior, estimand)
    assert_allclose(got.expected_trials, want_h, rtol=1e-12, atol=1e-14)
    assert_allclose(got.expected_bayes_risk, want_g, rtol=1e-11, atol=1e-15)
    assert_allclose(expected_trials(rule, prior), want_h, rtol=1e-12, atol=1e-14)
    assert_allclose(expected_bayes_risk(rule, prior, estimand), want_g, rtol=1e-11, atol=1e-15)


def test_full_depth_rule_is_binomial():
    prior = BetaParams(1, 1)
    rule = StoppingRule(10, np.r_[np.ones(n_nodes(9)), np.zeros(11)])
    res = evaluate(rule, prior)
    assert_allclose(res.expected_trials, 10.0, rtol=1e-14)
    # uniform prior, 10 trials: E[posterior variance] = 1/(6 * 12) averaged over k
    ks = np.arange(11)
    want = np.mean((ks + 1) * (11 - ks) / (12.0 ** 2 * 13.0))
    assert_allclose(res.expected_bayes_risk, want, rtol=1e-13)


def test_reach_probabilities_sum_over_leaves():
    rng = np.random.default_rng(3)
    rule = random_rule(rng, 8)
    prior = BetaParams(2, 3)
    u = reach_probabilities(rule, prior)
    q = np.r_[rule.q, np.zeros(rule.depth + 2)]
    assert_allclose(np.sum(u * (1 - q)), 1.0, rtol=1e-13)
    assert u[0] == 1.0


def test_node_indexing():
    assert node_index(0, 0) == 0
    assert node_index(2, 3) == 8
    assert n_nodes(3) == 10
    ks = np.array([0, 1, 4])
    ms = np.array([4, 4, 4])
    assert list(node_index(ks, ms)) == [10, 11, 14]


def test_rule_accessors():
    rule = StoppingRule.from_nodes(4, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 0.25)])
    assert rule.continuing_nodes() == [NodeId(0, 0), NodeId(0, 1), NodeId(1, 1)]
    assert rule.fractional_nodes() == [NodeId(1, 1)]
    assert rule.get(1, 1) == 0.25 and rule.get(5, 1) == 0.0
    assert rule.last_active_row() == 1
    assert StoppingRule(3, np.zeros(10)).last_active_row() == -1
    with pytest.raises(ValueError):
        rule.q[0] = 0.0
    other = rule.with_q(1, 1, 1.0)
    assert other.get(1, 1) == 1.0 and rule.get(1, 1) == 0.25
    assert not rule.same_support(other)


@pytest.mark.parametrize("bad", [np.zeros(5), np.full(10, 1.5), np.full(10, np.nan)])
def test_rule_rejects_bad_q(bad):
    with pytest.raises(ValueError):
        StoppingRule(3, bad)


def test_validate_messages():
    ok = StoppingRule.from_nodes(3, [(0, 0, 1), (0, 1, 1), (1, 2, 1)])
    assert validate(ok) is None
    assert check(ok) is ok
    trunc = StoppingRule.from_nodes(2, [(0, 0, 1), (0, 1, 1), (0, 2, 1)])
    assert validate(trunc).startswith("depth truncation")
    multi = StoppingRule.from_nodes(3, [(0, 0, 1), (0, 1, 0.5), (1, 1, 0.5)])
    assert validate(multi).startswith("multiplexing")
    orphan = StoppingRule.from_nodes(4, [(0, 0, 1), (0, 1, 1), (2, 2, 1)])
    assert validate(orphan).startswith("disconnected")
    gap = StoppingRule.from_nodes(5, [(0, 0, 1), (1, 3, 1)])
    assert validate(gap).startswith("disconnected")
    with pytest.raises(ValueError, match="disconnected"):
        check(gap)


def test_rule_file_round_trip(tmp_path):
    rule = StoppingRule.from_nodes(6, [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 0.123456789012345678)],
                                   prior=BetaParams(2, 152), estimand=Estimand.LOG_P, name="my rule",
                                   meta={"dmin": 1.25e-5, "nodes": 3, "tag": "x"})
    path = tmp_path / "r.rule"
    save_rule(rule, path)
    back = load_rule(path)
    assert back.same_support(rule)
    assert np.array_equal(back.q, rule.q)
    assert back.prior == rule.prior and back.estimand is Estimand.LOG_P
    assert back.name == "my rule" and back.meta == rule.meta
    assert dumps_rule(back) == dumps_rule(rule)


@pytest.mark.parametrize("text", ["", "nope 1\n", "bernstop-rule 2\ndepth 1\nnodes 0\n",
                                  "bernstop-rule 1\ndepth 2\nnodes 2\n0 0 1.0\n",
                                  "bernstop-rule 1\nnodes 0\n"])
def test_rule_file_errors(text):
    with pytest.raises(ValueError):
        loads_rule(text)


@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_round_trip_property(depth, seed):
    rule = random_rule(np.random.default_rng(seed), depth)
    back = loads_rule(dumps_rule(rule))
    assert np.array_equal(back.q, rule.q)


@given(st.integers(min_value=1, max_value=9), st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_more_continuation_never_lowers_trials(depth, seed):
    rng = np.random.default_rng(seed)
    rule = random_rule(rng, depth)
    bigger = StoppingRule(depth, np.maximum(rule.q, random_rule(rng, depth).q))
    prior = BetaParams(1, 1)
    assert expected_trials(bigger, prior) >= expected_trials(rule, prior) - 1e-12
    # continuing never increases the expected posterior risk
    assert expected_bayes_risk(bigger, prior) <= expected_bayes_risk(rule, prior) + 1e-15
