import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import special

from bernstop import rng
from bernstop.beta_core import BetaParams
from bernstop.designers import binomial_rule, design_threshold, negbinomial_rule, threshold_for_budget
from bernstop.evaluation import (Estimator, Population, conditional_expected_trials, conditional_leaves,
                                 conditional_metrics, conditional_mse, conditional_reach, mse_vs_budget_sweep,
                                 oracle_mse, prior_average, prior_quadrature, simulate_lockstep, simulate_many,
                                 simulate_stop)
from bernstop.trellis import Estimand, StoppingRule, evaluate, n_nodes, node_index

UNIFORM = BetaParams(1, 1)


def fixed_p_oracle(rule, p, estimate, target):
    """E[N | p] and E[(estimate - target)^2 | p] by walking every outcome sequence."""
    h = mse = 0.0
    stack = [(0, 0, 1.0)]
    while stack:
        k, m, w = stack.pop()
        q = rule.get(k, m) if m < rule.depth else 0.0
        stop = w * (1 - q)
        if stop > 0:
            h += m * stop
            mse += stop * (estimate(k, m) - target) ** 2
        if q > 0:
            stack.append((k + 1, m + 1, w * q * p))
            stack.append((k, m + 1, w * q * (1 - p)))
    return h, mse


def sequential_reference(rule, p, seed, stream):
    gen = rng.stream(seed, stream)
    k = m = 0
    while True:
        coin, outcome = gen.random(2)
        q = rule.get(k, m) if m < rule.depth else 0.0
        if not coin < q:
            return k, m
        k += outcome < p
        m += 1


@pytest.fixture(scope="module")
def small_rule():
    rule = design_threshold(BetaParams(2, 3), Estimand.P, 2e-3, depth=9)
    return rule.with_q(1, 2, 0.4)


@pytest.mark.parametrize("p", [0.0, 0.1, 0.37, 0.5, 0.93, 1.0])
def test_conditional_metrics_match_path_oracle(small_rule, p):
    prior = BetaParams(2, 3)
    est = lambda k, m: (prior.alpha + k) / (prior.total + m)  # noqa: E731
    h, mse = fixed_p_oracle(small_rule, p, est, p)
    assert_allclose(conditional_expected_trials(small_rule, p), h, rtol=1e-13, atol=1e-15)
    assert_allclose(conditional_mse(small_rule, p, "mmse", "p", prior), mse, rtol=1e-12, atol=1e-16)
    cm = conditional_metrics(small_rule, p, Estimator.MMSE, Estimand.P, prior)
    assert cm.expected_trials_given_p == pytest.approx(h, rel=1e-13, abs=1e-15)


@pytest.mark.parametrize("p", [0.05, 0.4, 0.77])
def test_conditional_ml_and_log_estimands(p):
    rule = binomial_rule(6, 8)
    h, mse = fixed_p_oracle(rule, p, lambda k, m: k / m, p)
    assert_allclose(conditional_mse(rule, p, "ml", "p"), mse, rtol=1e-12)
    prior = BetaParams(1.5, 2)
    est = lambda k, m: special.digamma(prior.alpha + k) - special.digamma(prior.total + m)  # noqa: E731
    _, mse_log = fixed_p_oracle(rule, p, est, math.log(p))
    assert_allclose(conditional_mse(rule, p, "mmse", "logp", prior), mse_log, rtol=1e-11)


def test_conditional_vectorized_over_p(small_rule):
    ps = np.linspace(0, 1, 11)
    h = conditional_expected_trials(small_rule, ps)
    assert h.shape == (11,)
    assert_allclose(h, [conditional_expected_trials(small_rule, float(p)) for p in ps], rtol=1e-14)


def test_ml_undefined_cases():
    with pytest.raises(ValueError, match="m = 0"):
        conditional_mse(StoppingRule(3, np.zeros(10)), 0.3, "ml", "p")
    with pytest.raises(ValueError, match="k = 0"):
        conditional_mse(binomial_rule(3), 0.3, "ml", "logp")
    # only the leaf (1, 1) is reachable when p = 1
    assert conditional_mse(negbinomial_rule(1, 40), 1.0, "ml", "logp") == 0.0
    with pytest.raises(ValueError):
        conditional_mse(binomial_rule(3), 1.2)
    with pytest.raises(ValueError):
        conditional_mse(StoppingRule(2, np.zeros(6)), 0.5, "mmse", "p")


def test_reach_and_leaves(small_rule):
    u = conditional_reach(small_rule, 0.3)
    assert u.size == n_nodes(small_rule.depth + 1)
    leaves = conditional_leaves(small_rule, 0.3)
    assert_allclose(sum(leaves.values()), 1.0, rtol=1e-14)
    for (k, m), mass in leaves.items():
        assert_allclose(mass, u[node_index(k, m)] * (1 - small_rule.get(k, m)), rtol=1e-14)


@pytest.mark.parametrize("estimand", list(Estimand))
def test_prior_average_recovers_trellis_metrics(estimand):
    prior = BetaParams(2, 3)
    rule = threshold_for_budget(prior, estimand, 14.0)
    res = evaluate(rule, prior, estimand)
    h = prior_average(lambda p: conditional_expected_trials(rule, p), prior)
    g = prior_average(lambda p: conditional_mse(rule, p, "mmse", estimand, prior), prior)
    assert_allclose(h, res.expected_trials, rtol=1e-9)
    assert_allclose(g, res.expected_bayes_risk, rtol=1e-9)


def test_prior_quadrature_moments():
    prior = BetaParams(0.5, 3.5)
    p, w = prior_quadrature(prior, 64)
    assert_allclose(w.sum(), 1.0, rtol=1e-14)
    assert_allclose(np.dot(w, p), 0.5 / 4.0, rtol=1e-12)
    assert_allclose(np.dot(w, p ** 5), math.exp(special.betaln(5.5, 3.5) - special.betaln(0.5, 3.5)), rtol=1e-12)


def test_simulation_matches_sequential_reference(small_rule):
    for stream in range(40):
        assert simulate_stop(small_rule, 0.35, 99, stream) == sequential_reference(small_rule, 0.35, 99, stream)


def test_lockstep_independent_of_batch_size():
    # long rules cross several buffer blocks; block length depends on the batch size
    rule = binomial_rule(600)
    streams = np.arange(20000)
    k, m = simulate_lockstep(rule, 0.2, 5, streams)
    assert np.all(m == 600)
    for i in (0, 17, 19999):
        assert simulate_stop(rule, 0.2, 5, int(i)) == (k[i], m[i])
    assert sequential_reference(rule, 0.2, 5, 17) == (k[17], m[17])
    ks, _ = simulate_lockstep(rule, 0.2, 5, streams[::-1][:50])
    assert np.array_equal(ks, k[::-1][:50])


def test_simulation_frequencies(small_rule):
    n = 200_000
    k, m = simulate_many(small_rule, 0.3, 2024, n)
    leaves = conditional_leaves(small_rule, 0.3)
    for (kk, mm), prob in leaves.items():
        freq = np.mean((k == kk) & (m == mm))
        assert abs(freq - prob) <= 5 * math.sqrt(prob * (1 - prob) / n) + 1e-12
    assert set(zip(k.tolist(), m.tolist())) <= set(leaves)
    k2, m2 = simulate_many(small_rule, 0.3, 2024, 5000, chunk=777)
    assert np.array_equal(k2, k[:5000]) and np.array_equal(m2, m[:5000])


def test_population_and_oracle_mse():
    pop = Population.from_values([[0.1, 0.1], [0.4, 0.9]])
    assert_allclose(pop.weights, [0.5, 0.25, 0.25])
    assert_allclose(pop.mean_spread(), 0.5 * 0.3 + 0.25 * math.sqrt(0.24) + 0.25 * 0.3)
    assert_allclose(oracle_mse(pop, 10.0), pop.mean_spread() ** 2 / 10.0)
    assert Population.from_prior(UNIFORM, 32).label == "beta(1.0,1.0)"


def test_budget_sweep_rows():
    pop = Population.from_prior(UNIFORM, 256)
    rows = mse_vs_budget_sweep(pop, UNIFORM, [10.0, 10.5])
    by = {(r["method"], r["eta"]): r for r in rows}
    assert len(rows) == 6
    for eta in (10.0, 10.5):
        assert_allclose(by[("threshold", eta)]["expected_trials"], eta, rtol=1e-9)
        assert by[("threshold", eta)]["mse"] < by[("binomial", eta)]["mse"]
    # half-integer binomial budgets time-share between 10 and 11 trials
    b10, b11 = (pop.mse(binomial_rule(n, prior=UNIFORM), prior=UNIFORM) for n in (10, 11))
    assert_allclose(by[("binomial", 10.5)]["mse"], 0.5 * (b10 + b11), rtol=1e-12)
    with pytest.raises(ValueError):
        mse_vs_budget_sweep(pop, UNIFORM, [5.0], methods=["bogus"])


def test_threshold_beats_binomial_on_phantom_population():
    from bernstop import imaging
    scene = imaging.rescale(imaging.shepp_logan(100), 0.001, 0.101)
    prior = BetaParams(2, 152)
    rows = mse_vs_budget_sweep(Population.from_values(scene.p), prior, [10.0, 50.0, 200.0])
    by = {(r["method"], r["eta"]): r["mse"] for r in rows}
    for eta in (10.0, 50.0, 200.0):
        assert by[("threshold", eta)] < by[("binomial", eta)]


def test_threshold_can_beat_oracle_binomial_for_skewed_prior():
    prior = BetaParams(1, 50)
    rows = mse_vs_budget_sweep(Population.from_prior(prior, 256), prior, [2.0, 5.0],
                               methods=("threshold", "oracle"))
    by = {(r["method"], r["eta"]): r["mse"] for r in rows}
    assert any(by[("threshold", eta)] < by[("oracle", eta)] for eta in (2.0, 5.0))


def test_all_methods_spend_the_same_budget_under_uniform_prior():
    from bernstop.oracle import oracle_trial_count
    assert_allclose(evaluate(binomial_rule(200), UNIFORM).expected_trials, 200.0, rtol=1e-13)
    thr = threshold_for_budget(UNIFORM, Estimand.P, 200.0)
    assert_allclose(evaluate(thr, UNIFORM).expected_trials, 200.0, rtol=1e-10)
    p, w = prior_quadrature(UNIFORM, 256)
    counts = np.array([oracle_trial_count(float(x), UNIFORM, 200.0) for x in p])
    assert_allclose(np.dot(w, counts), 200.0, rtol=1e-5)


def test_threshold_approaches_oracle_at_large_budget():
    # Bayes risk of the MMSE estimate is the prior-averaged MSE
    rule = threshold_for_budget(UNIFORM, Estimand.P, 800.0)
    ratio = evaluate(rule, UNIFORM).expected_bayes_risk / oracle_mse(Population.from_prior(UNIFORM), 800.0)
    assert abs(ratio - 1) < 0.03
