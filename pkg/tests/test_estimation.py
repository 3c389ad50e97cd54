import itertools

import numpy as np
import pytest

from scot import estimation, ot, relaxed, scm
from scot.errors import ConfigError, RankDeficient

from conftest import linear_model


def test_noiseless_recovery():
    # two noisy roots, two children without noise
    noise = [scm.Uniform(-1, 1), scm.Uniform(-1, 1), scm.Uniform(0, 0), scm.Uniform(0, 0)]
    m = linear_model({2: {0: -0.3, 1: 1.7}, 3: {0: 0.8}}, noise=noise)
    s = scm.sample(m, 30, 0)
    fit = estimation.fit_linear_anm(s, m.dag)
    np.testing.assert_allclose(fit.model.equations[2].coeffs, [-0.3, 1.7], atol=1e-10)
    np.testing.assert_allclose(fit.model.equations[3].coeffs, [0.8], atol=1e-10)


def test_zero_equations_within_three_se():
    m = linear_model({1: {0: 0.0}, 2: {0: 0.0, 1: 0.0}})
    s = scm.sample(m, 400, 3)
    fit = estimation.fit_linear_anm(s, m.dag)
    for i in (1, 2):
        coeffs = np.asarray(fit.model.equations[i].coeffs)
        se = np.asarray(fit.coef_se[i][:-1])
        assert (np.abs(coeffs) <= 3 * se).all()


def test_alpha_consistency(demo_model):
    s = scm.sample(demo_model, 5000, 8)
    fit = estimation.fit_linear_anm(s, demo_model.dag)
    assert abs(fit.model.equations[1].coeffs[0] - 0.5) < 0.05


def test_residual_variance_nonnegative(demo_model):
    fit = estimation.fit_linear_anm(scm.sample(demo_model, 50, 1), demo_model.dag)
    assert all(v >= 0 for v in fit.residual_variance)


def test_refit_fixpoint(demo_model):
    s = scm.sample(demo_model, 60, 2)
    fit = estimation.fit_linear_anm(s, demo_model.dag)
    regenerated = scm.push_to_feature(fit.model, scm.push_to_exogenous(fit.model, s))
    again = estimation.fit_linear_anm(regenerated, demo_model.dag)
    for a, b in zip(fit.model.equations, again.model.equations):
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-8)
        assert abs(a.intercept - b.intercept) < 1e-8


def test_fitted_model_is_bijective(demo_model, rng):
    fit = estimation.fit_linear_anm(scm.sample(demo_model, 40, 2), demo_model.dag)
    u = rng.uniform(-1, 1, (1000, 2))
    assert np.abs(fit.model.inverse(fit.model.forward(u)) - u).max() < 1e-10


def test_fit_report_config_roundtrip(demo_model):
    fit = estimation.fit_linear_anm(scm.sample(demo_model, 20, 2), demo_model.dag, demo_model.names)
    again = scm.scm_from_config(fit.to_config())
    x = np.array([[0.2, -0.4]])
    np.testing.assert_allclose(again.inverse(x), fit.model.inverse(x))
    assert isinstance(again.noise[1], scm.Empirical)


def test_collinear_parents():
    x = np.random.default_rng(0).standard_normal(20)
    s = scm.SampleMatrix(np.column_stack([x, 2 * x, x + 1]))
    with pytest.raises(RankDeficient):
        estimation.fit_linear_anm(s, scm.DagSpec([[], [], [0, 1]]))


def test_too_few_samples(demo_model):
    with pytest.raises(ConfigError):
        estimation.fit_linear_anm(scm.sample(demo_model, 2, 0), demo_model.dag)


def test_affine_sup_matches_dense_grid(rng):
    for _ in range(10):
        a, b = rng.standard_normal(3), rng.standard_normal()
        lo, hi = -rng.uniform(0, 2, 3), rng.uniform(0, 2, 3)
        axes = [np.linspace(l, h, 21) for l, h in zip(lo, hi)]
        dense = max(abs(a @ np.array(pt) + b) for pt in itertools.product(*axes))
        assert estimation.affine_sup_on_box(a, b, lo, hi) == pytest.approx(dense, abs=1e-12)


def test_stability_scale_zero(demo_model):
    src, tgt = scm.sample(demo_model, 3, 1), scm.sample(demo_model, 3, 2)
    res = estimation.stability_curve(src, tgt, demo_model, [0.0], ot.CostSpec(1), relaxed.RelaxedSolveConfig(eps=0.1))
    assert abs(res.rows[0].gap) <= 1e-10 and res.rows[0].sup_gap == 0


def test_stability_constant_shift_sup_is_exact():
    m = linear_model({1: {0: 0.0}})
    src, tgt = scm.sample(m, 3, 1), scm.sample(m, 3, 2)
    res = estimation.stability_curve(
        src, tgt, m, [0.3, 0.1], ot.CostSpec(1), relaxed.RelaxedSolveConfig(eps=0.1), mode="constant", node=1
    )
    assert [r.sup_gap for r in res.rows] == [0.3, 0.1]


def test_stability_jitter_sup_matches_scale(demo_model):
    src, tgt = scm.sample(demo_model, 3, 1), scm.sample(demo_model, 3, 2)
    res = estimation.stability_curve(
        src, tgt, demo_model, [0.2, 0.05], ot.CostSpec(2), relaxed.RelaxedSolveConfig(eps=0.1), n_directions=1
    )
    for r in res.rows:
        assert r.sup_gap == pytest.approx(r.scale, rel=1e-12)


def test_stability_rejects_bad_input(demo_model):
    s = scm.sample(demo_model, 3, 1)
    with pytest.raises(ConfigError):
        estimation.stability_curve(s, s, demo_model, [-0.1], ot.CostSpec(1))
    with pytest.raises(ConfigError):
        estimation.stability_curve(s, s, demo_model, [0.1], ot.CostSpec(1), mode="random")
