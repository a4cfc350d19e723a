from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resptime.matrix import ResponseMatrix
from resptime.model import (
    FitConfig,
    ModelParams,
    UnfittableError,
    fit,
    nll,
    nll_gradient,
    normalize_identifiability,
    predict_log_time,
    read_params,
    standardized_residuals,
    update_alpha_closed_form,
    update_location_params,
    write_params,
)
from resptime.synthetic import SynthSpec, generate

from conftest import fd_gradient, random_instance

ADDITIVE = ResponseMatrix.from_dense([[1.0, 2.0], [3.0, 4.0]])


def params_for(m, alpha, beta, zeta):
    return ModelParams(m.question_ids, m.user_ids, alpha, beta, zeta)


def one_cell(value):
    return ResponseMatrix.from_dense([[value]])


# -- nll ---------------------------------------------------------------------


def test_nll_zero_residuals_unit_alpha():
    p = params_for(ADDITIVE, [1, 1], [0, 1], [1, 3])
    assert nll(p, ADDITIVE) == 0.0


def test_nll_single_observation():
    m = one_cell(2.0)
    p = params_for(m, [2.0], [1.5], [0.1])
    assert nll(p, m) == pytest.approx(2 * 0.16 - math.log(2), abs=1e-12)
    assert nll(p, m) == pytest.approx(-0.3731, abs=1e-4)


def test_nll_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        nll(params_for(ADDITIVE, [0, 1], [0, 0], [0, 0]), ADDITIVE)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_nll_shift_invariance(seed, c):
    m, p = random_instance(np.random.default_rng(seed))
    shifted = p.replace(beta=p.beta + c, zeta=p.zeta - c)
    a, b = nll(p, m), nll(shifted, m)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


# -- gradient ----------------------------------------------------------------


def test_gradient_at_zero_residuals():
    p = params_for(ADDITIVE, [1, 1], [0, 1], [1, 3])
    g = nll_gradient(p, ADDITIVE)
    assert np.all(g.beta == 0) and np.all(g.zeta == 0)
    np.testing.assert_array_equal(g.alpha, -ADDITIVE.question_counts())


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    m, p = random_instance(np.random.default_rng(seed))
    g = nll_gradient(p, m)
    for analytic, numeric in zip(g, fd_gradient(lambda q: nll(q, m), p)):
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_alpha_gradient_vanishes_at_closed_form():
    m, p = random_instance(np.random.default_rng(3))
    alpha, degenerate = update_alpha_closed_form(m, p.beta, p.zeta)
    assert not degenerate.any()
    g = nll_gradient(p.replace(alpha=alpha), m)
    np.testing.assert_allclose(g.alpha, 0.0, atol=1e-9)


# -- block updates -----------------------------------------------------------


@pytest.mark.parametrize(
    "residuals, expected",
    [([1.0, -1.0], 1.0), ([0.5], 2.0)],
)
def test_alpha_closed_form(residuals, expected):
    m = ResponseMatrix.from_dense(np.array(residuals)[:, None])
    alpha, degenerate = update_alpha_closed_form(m, [0.0], np.zeros(len(residuals)))
    assert alpha[0] == pytest.approx(expected, rel=1e-15)
    assert not degenerate[0]


def test_alpha_closed_form_degenerate():
    m = ResponseMatrix.from_dense([[3.0], [3.0]])
    alpha, degenerate = update_alpha_closed_form(m, [3.0], [0.0, 0.0])
    assert alpha[0] == 1e3 and degenerate[0]


def test_location_single_cell():
    m = one_cell(math.log(42.0))
    beta, zeta = update_location_params(m, params_for(m, [1.0], [0.0], [0.0]))
    assert beta[0] == pytest.approx(math.log(42.0))


def test_location_updates_on_additive_matrix():
    p = params_for(ADDITIVE, [1, 1], [0, 0], [0, 0])
    for _ in range(50):
        beta, zeta = update_location_params(ADDITIVE, p)
        p = p.replace(beta=beta, zeta=zeta)
    p = normalize_identifiability(p)
    np.testing.assert_allclose(p.beta, [2, 3], atol=1e-12)
    np.testing.assert_allclose(p.zeta, [-1, 1], atol=1e-12)
    np.testing.assert_allclose(standardized_residuals(p, ADDITIVE), 0, atol=1e-12)


def test_location_updates_fixed_point():
    m = generate(SynthSpec(n_users=40, n_questions=12, seed=1)).matrix
    p, _ = fit(m)
    beta, zeta = update_location_params(m, p)
    moved = normalize_identifiability(p.replace(beta=beta, zeta=zeta))
    assert nll(moved, m) == pytest.approx(nll(p, m), rel=1e-12)


# -- fit ---------------------------------------------------------------------


def test_fit_additive_matrix():
    p, report = fit(ADDITIVE)
    assert report.converged
    np.testing.assert_allclose(standardized_residuals(p, ADDITIVE) / p.alpha[ADDITIVE.cols], 0, atol=1e-12)
    np.testing.assert_array_equal(p.alpha, [1e3, 1e3])
    assert report.degenerate_questions == ["q0", "q1"]


def test_fit_recovers_synthetic_slowness():
    truth = generate(SynthSpec())
    p, report = fit(truth.matrix)
    assert report.converged
    r = np.corrcoef(p.zeta, truth.params.zeta)[0, 1]
    assert r >= 0.9


def test_fit_is_deterministic():
    m = generate(SynthSpec(n_users=60, n_questions=15, seed=5)).matrix
    a, ra = fit(m)
    b, rb = fit(m)
    for name in ("alpha", "beta", "zeta"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert ra.nll_trace == rb.nll_trace


def test_fit_rejects_empty_matrix():
    with pytest.raises(UnfittableError):
        fit(ResponseMatrix.from_triplets([]))


@pytest.mark.parametrize("seed", range(15))
def test_fit_invariants_on_random_instances(seed):
    m, _ = random_instance(np.random.default_rng(100 + seed))
    p, report = fit(m)
    trace = report.nll_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert abs(p.zeta.mean()) < 1e-12
    assert np.all((p.alpha > 0) & (p.alpha <= 1e3))
    assert report.final_nll == pytest.approx(nll(p, m), rel=1e-12, abs=1e-9)
    if report.converged and not report.degenerate_questions:
        assert report.final_gradient_norm < 1e-6 * (1 + abs(report.final_nll))


def test_cg_agrees_with_bcd():
    m = generate(SynthSpec(n_users=80, n_questions=20, seed=2)).matrix
    a, ra = fit(m)
    b, rb = fit(m, FitConfig(method="cg", rel_tol=1e-13))
    assert rb.final_nll == pytest.approx(ra.final_nll, rel=1e-7)
    np.testing.assert_allclose(b.beta, a.beta, atol=1e-3)
    np.testing.assert_allclose(b.alpha, a.alpha, rtol=1e-3)


def test_pure_bcd_still_descends():
    m = generate(SynthSpec(n_users=80, n_questions=20, seed=4)).matrix
    _, report = fit(m, FitConfig(newton=False))
    trace = report.nll_trace
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_zero_init():
    m = generate(SynthSpec(n_users=50, n_questions=10, seed=6)).matrix
    a, ra = fit(m)
    b, rb = fit(m, FitConfig(init="zeros"))
    assert rb.final_nll == pytest.approx(ra.final_nll, rel=1e-9)


def test_mean_intensity_equals_mean_prediction_when_complete():
    truth = generate(SynthSpec(n_users=50, n_questions=12, missingness=0.0, seed=8))
    p, _ = fit(truth.matrix)
    m = truth.matrix
    assert p.beta.mean() == pytest.approx(np.mean(p.beta[m.cols] + p.zeta[m.rows]), abs=1e-12)


def test_scale_equivariance():
    m = generate(SynthSpec(n_users=60, n_questions=15, seed=9)).matrix
    k = 7.5
    scaled = ResponseMatrix(m.user_ids, m.question_ids, m.rows, m.cols, m.log_times + math.log(k))
    a, _ = fit(m)
    b, _ = fit(scaled)
    np.testing.assert_allclose(b.beta, a.beta + math.log(k), atol=1e-6)
    np.testing.assert_allclose(b.zeta, a.zeta, atol=1e-6)
    np.testing.assert_allclose(b.alpha, a.alpha, rtol=1e-6)


@pytest.mark.parametrize(
    "kwargs",
    [dict(alpha_floor=0), dict(alpha_floor=2, alpha_cap=1), dict(rel_tol=0), dict(init="random"), dict(method="lbfgs")],
)
def test_fit_config_validation(kwargs):
    with pytest.raises(ValueError):
        FitConfig(**kwargs)


# -- normalisation, residuals, prediction ------------------------------------


def test_normalize_identity_when_centred():
    p = ModelParams(("q",), ("a", "b"), [1.0], [2.0], [-1.0, 1.0])
    n = normalize_identifiability(p)
    assert np.array_equal(n.beta, p.beta) and np.array_equal(n.zeta, p.zeta)


def test_normalize_by_hand():
    p = ModelParams(("q",), ("a", "b"), [1.0], [0.0], [1.0, 3.0])
    n = normalize_identifiability(p)
    np.testing.assert_array_equal(n.zeta, [-1.0, 1.0])
    np.testing.assert_array_equal(n.beta, [2.0])
    m = ResponseMatrix.from_dense([[0.5], [2.5]], user_ids=("a", "b"), question_ids=("q",))
    assert nll(n, m) == nll(p, m)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_prediction_invariant_under_normalization(seed):
    m, p = random_instance(np.random.default_rng(seed))
    n = normalize_identifiability(p)
    assert abs(n.zeta.mean()) < 1e-12
    before = p.beta[m.cols] + p.zeta[m.rows]
    after = n.beta[m.cols] + n.zeta[m.rows]
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


def test_standardized_residual_by_hand():
    m = one_cell(3.0)
    p = params_for(m, [2.0], [2.0], [0.5])
    assert standardized_residuals(p, m).tolist() == [1.0]
    assert standardized_residuals(params_for(m, [2.0], [3.0], [0.0]), m).tolist() == [0.0]


def test_residual_count_matches_observations():
    m, p = random_instance(np.random.default_rng(11))
    assert standardized_residuals(p, m).shape == (m.n_obs,)


def test_predict_log_time():
    p = ModelParams(("q1", "q2"), ("u",), [1.0, 1.0], [5.098, 3.155], [0.0])
    assert predict_log_time(p, "q1", "u") == 5.098
    # the quoted typical times are whole seconds
    assert round(math.exp(predict_log_time(p, "q1", "u"))) == 164
    assert round(math.exp(predict_log_time(p, "q2", "u"))) == 23
    with pytest.raises(KeyError):
        predict_log_time(p, "q3", "u")


def test_params_csv_round_trip(tmp_path):
    m, p = random_instance(np.random.default_rng(12))
    write_params(p, tmp_path / "p.csv")
    back = read_params(tmp_path / "p.csv")
    for name in ("alpha", "beta", "zeta"):
        assert getattr(back, f"{name}_map")() == getattr(p, f"{name}_map")()
