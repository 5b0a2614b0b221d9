import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bernstop import imaging
from bernstop.beta_core import BetaParams
from bernstop.designers import binomial_rule
from bernstop.evaluation import Population, simulate_stop

PRIOR = BetaParams(2, 152)


@pytest.fixture(scope="module")
def small_scene():
    return imaging.rescale(imaging.shepp_logan(32), 0.001, 0.101)


def test_phantom_structure():
    sl = imaging.shepp_logan(101)
    assert sl.p.shape == (101, 101)
    assert sl.p.min() == 0.0 and sl.p.max() == 1.0
    assert sl.p[0, 0] == 0.0
    assert sl.p[50, 50] == pytest.approx(0.2)
    # the upper ellipse (centre y = +0.35) lies in the top half of the image
    assert sl.p[32, 50] == pytest.approx(0.3)
    assert sl.p[68, 50] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        imaging.shepp_logan(8)


def test_rescaled_phantom_levels():
    sc = imaging.rescale(imaging.shepp_logan(100), 0.001, 0.101)
    assert_allclose(np.unique(sc.p), [0.001, 0.011, 0.021, 0.031, 0.041, 0.101], atol=1e-15)
    assert sc.lo == 0.001 and sc.hi == 0.101
    assert sc.p.min() == 0.001 and sc.p.max() == 0.101


def test_rescale_validation():
    flat = imaging.Scene(np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        imaging.rescale(flat, 0.1, 0.2)
    with pytest.raises(ValueError):
        imaging.rescale(imaging.shepp_logan(16), 0.3, 0.2)
    with pytest.raises(ValueError):
        imaging.Scene(np.array([[0.5, 1.5]]))


def test_scene_files_round_trip(tmp_path, small_scene):
    csv = tmp_path / "s.csv"
    imaging.save_image(small_scene.p, csv)
    back = imaging.load_scene(csv)
    assert np.array_equal(back.p, small_scene.p)
    pgm = tmp_path / "s.pgm"
    imaging.save_image(small_scene.p, pgm, 0.0, 1.0)
    back = imaging.load_scene(pgm)
    assert_allclose(back.p, small_scene.p, atol=1.0 / 65535)
    again = imaging.load_scene(pgm, 0.001, 0.101)
    assert again.p.min() == 0.001 and again.p.max() == 0.101


def test_ascii_pgm(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_text("P2\n# comment\n3 2\n255\n0 51 102\n153 204 255\n")
    assert_allclose(imaging.load_scene(path).p, [[0, 0.2, 0.4], [0.6, 0.8, 1.0]])
    path.write_text("P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        imaging.load_scene(path)


def test_acquire_matches_single_process_simulation(small_scene):
    rule = imaging.budget_rule("threshold", small_scene, PRIOR, 50.0)
    rec = imaging.acquire(small_scene, rule, 42)
    flat = small_scene.p.ravel()
    for i in (0, 5, 511, 1023):
        assert simulate_stop(rule, flat[i], 42, i) == (rec.k.ravel()[i], rec.m.ravel()[i])
    again = imaging.acquire(small_scene, rule, 42)
    assert np.array_equal(again.k, rec.k) and np.array_equal(again.m, rec.m)


def test_budget_rules(small_scene):
    thr = imaging.budget_rule("threshold", small_scene, PRIOR, 50.0)
    pop = Population.from_values(small_scene.p)
    assert_allclose(pop.trials(thr), 50.0, rtol=1e-9)
    assert imaging.budget_rule("binomial", small_scene, PRIOR, 50.0).name == "binomial"
    with pytest.raises(ValueError):
        imaging.budget_rule("binomial", small_scene, PRIOR, 50.5)
    with pytest.raises(ValueError):
        imaging.budget_rule("oracle", small_scene, PRIOR, 50.0)


def test_pixelwise_estimates(small_scene):
    rec = imaging.acquire(small_scene, binomial_rule(20), 1)
    mmse = imaging.estimate_pixelwise(rec, PRIOR, "p", "mmse", scene=small_scene)
    assert_allclose(mmse.estimate, (2 + rec.k) / (154 + 20.0))
    ml = imaging.estimate_pixelwise(rec, PRIOR, "p", "ml", scene=small_scene)
    assert_allclose(ml.estimate, rec.k / 20.0)
    assert mmse.mse == pytest.approx(np.mean((mmse.estimate - small_scene.p) ** 2))
    with pytest.raises(ValueError):
        imaging.estimate_pixelwise(rec, PRIOR, "logp", "ml")
    with pytest.raises(ValueError):
        imaging.estimate_pixelwise(rec, PRIOR, "p", "tv")


def test_metrics():
    sc = imaging.Scene(np.array([[0.1, 0.2]]), 0.0, 0.2)
    out = imaging.image_metrics(np.array([[0.1, 0.3]]), sc, other=np.array([[0.3, 0.4]]))
    assert out["mse"] == pytest.approx(0.005)
    assert out["psnr_db"] == pytest.approx(10 * math.log10(0.04 / 0.005))
    assert out["improvement_db"] == pytest.approx(10 * math.log10(0.04 / 0.005))
    assert imaging.psnr(0.0, 1.0) == imaging.PSNR_INF
    with pytest.raises(ValueError):
        imaging.image_metrics(np.zeros((2, 2)), sc)


def test_tv_reconstruction(small_scene):
    rec = imaging.acquire(small_scene, binomial_rule(100), 3)
    r = imaging.estimate_tv_ml(rec, 8.0, scene=small_scene)
    assert r.info["converged"]
    base = imaging.estimate_pixelwise(rec, PRIOR, "p", "ml", scene=small_scene)
    assert r.mse < base.mse
    log = imaging.estimate_tv_ml(rec, 8.0, "logp", scene=small_scene)
    assert_allclose(log.estimate, np.log(r.estimate))


def test_experiment_is_deterministic_and_thread_independent(small_scene):
    kw = dict(eta=40.0, runs=3, seed=9, recon="tv", tv_weights=[2.0, 8.0])
    a = imaging.run_image_experiment(small_scene, PRIOR, threads=1, **kw)
    b = imaging.run_image_experiment(small_scene, PRIOR, threads=2, **kw)
    assert a.rows == b.rows and a.summary == b.summary
    assert set(a.tv_sweep) == {"binomial", "threshold"}
    assert all(r["converged"] for r in a.rows)
    assert a.summary["binomial"]["mean_trials"] == 40.0
    assert "improvement_db" in a.summary


def test_threshold_acquisition_spends_the_budget_on_the_phantom():
    scene = imaging.rescale(imaging.shepp_logan(100), 0.001, 0.101)
    rec = imaging.acquire(scene, imaging.budget_rule("threshold", scene, PRIOR, 200.0), 4)
    assert abs(rec.m.mean() / 200.0 - 1) < 0.02
    rec = imaging.acquire(scene, imaging.budget_rule("binomial", scene, PRIOR, 200.0), 4)
    assert np.all(rec.m == 200)
