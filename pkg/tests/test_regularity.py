import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otreg.errors import ConfigError, DomainError
from otreg.regularity import (AffineFrame, MapInstance, RegularityConfig, ball_lattice,
                              campanato_iterate, campanato_quantity, classify_regular_points,
                              excess, harmonic_approximation, instance_excess, local_interpolant,
                              one_step_improvement, scan_grid, select_good_radius, sym2_exp,
                              write_decay_csv)

CFG = RegularityConfig()


def _ones(p):
    return np.ones(len(np.atleast_2d(p)))


def linear_instance(L, alpha=0.5):
    L = np.asarray(L, dtype=float)
    Li = np.linalg.inv(L)
    return MapInstance(lambda x: np.atleast_2d(x) @ L.T, lambda y: np.atleast_2d(y) @ Li.T,
                       _ones, _ones, alpha)


def translation_instance(v, alpha=0.5):
    v = np.asarray(v, dtype=float)
    return MapInstance(lambda x: np.atleast_2d(x) + v, lambda y: np.atleast_2d(y) - v,
                       _ones, _ones, alpha)


# configuration and matrix exponential ----------------------------------------


def test_config_defaults_and_validation():
    assert CFG.alpha_prime == pytest.approx(0.75)
    with pytest.raises(ConfigError):
        RegularityConfig(theta=1.5)
    with pytest.raises(ConfigError):
        RegularityConfig(alpha=0.0)


def test_sym2_exp_closed_forms():
    assert np.allclose(sym2_exp(np.zeros((2, 2))), np.eye(2), atol=0)
    a = 0.3
    assert np.allclose(sym2_exp(np.diag([a, -a])), np.diag([np.exp(-a / 2), np.exp(a / 2)]),
                       rtol=1e-14)


def _series_exp(M, terms=30):
    out, term = np.eye(2), np.eye(2)
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_sym2_exp_matches_series(p, q, r):
    A = np.array([[p, q], [q, r]])
    assert np.allclose(sym2_exp(A), _series_exp(-A / 2), rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_sym2_exp_trace_free_has_unit_determinant(p, q):
    B = sym2_exp(np.array([[p, q], [q, -p]]))
    assert abs(np.linalg.det(B) - 1) < 1e-13
    assert np.allclose(B, B.T)


def test_affine_frame_rejects_bad_input():
    with pytest.raises(DomainError):
        AffineFrame(np.diag([2.0, 1.0]), np.zeros(2), 1.0)
    with pytest.raises(DomainError):
        AffineFrame(np.eye(2), np.zeros(2), -1.0)


# excess --------------------------------------------------------------------


def test_excess_identity_is_zero(identity):
    pair, sol = identity
    rep = excess(sol, pair, 0.5)
    assert rep.excess == 0.0
    assert rep.gamma < 1e-12


def test_excess_shift_equals_eps_squared(shift):
    pair, sol = shift
    for R in (0.5, 1.0):
        assert excess(sol, pair, R).excess == pytest.approx(0.01 / R**2, rel=1e-12)


def test_excess_matches_direct_sum(smooth):
    pair, sol = smooth
    R = 0.6
    inside = np.hypot(*sol.sources.T) < R
    x, m = sol.sources[inside], sol.masses[inside]
    d2 = np.sum((sol.map[inside] - x) ** 2, axis=1)
    oracle = np.sum(m * d2) / np.sum(m / pair.rho0(x)) / R**2
    assert excess(sol, pair, R).excess == pytest.approx(oracle, rel=1e-12)


def test_excess_is_invariant_under_rescaling():
    inst = linear_instance(np.diag([1.1, 1 / 1.1]))
    R, c = 0.4, np.array([0.0, 0.0])
    a = instance_excess(inst, R, CFG).excess
    b = instance_excess(inst.rescaled(c, R), 1.0, CFG).excess
    assert a == pytest.approx(b, rel=1e-12)


def test_excess_rejects_empty_ball(identity):
    pair, sol = identity
    with pytest.raises(DomainError):
        excess(sol, pair, 0.1, center=(5.0, 5.0))


def test_ball_lattice_area():
    pts, cell = ball_lattice(1.0, 200)
    assert len(pts) * cell == pytest.approx(np.pi, rel=1e-3)


# harmonic approximation ----------------------------------------------------


def test_good_radius_value_below_mean():
    inst = linear_instance(np.diag([1.05, 1 / 1.05]))
    good = select_good_radius(local_interpolant(inst, CFG), CFG.n_shells, CFG.n_theta)
    assert 0.5 < good.R < 1.0
    assert good.values.min() <= good.mean_value


def test_harmonic_approximation_identity_is_zero():
    ha = harmonic_approximation(linear_instance(np.eye(2)), CFG)
    assert ha.residual == 0.0
    assert np.allclose(ha.phi.gradient_at_origin(), 0.0, atol=1e-15)


def test_harmonic_approximation_translation_is_linear():
    ha = harmonic_approximation(translation_instance([0.05, -0.02]), CFG)
    assert np.allclose(ha.phi.gradient_at_origin(), [0.05, -0.02], atol=1e-12)
    assert np.allclose(ha.phi.hessian_at_origin(), 0.0, atol=1e-10)
    assert ha.residual < 1e-20


# one step and iteration ----------------------------------------------------


def test_one_step_identity_keeps_frame():
    step = one_step_improvement(linear_instance(np.eye(2)), 1.0, CFG)
    assert np.array_equal(step.frame.B, np.eye(2))
    assert step.after.excess == 0.0
    assert step.passed


def test_one_step_translation_recovers_shift():
    eps = 0.05
    step = one_step_improvement(translation_instance([eps, 0.0]), 1.0, CFG)
    assert np.allclose(step.frame.b, [eps, 0.0], atol=1e-12)
    assert step.after.excess <= 1e-3 * eps**2
    assert step.passed


def test_one_step_stretch_reduces_excess():
    d = 0.05
    inst = linear_instance(np.diag([1 + d, 1 / (1 + d)]))
    step = one_step_improvement(inst, 1.0, CFG)
    assert step.trace_residual == pytest.approx(0.0, abs=1e-12)
    assert abs(np.linalg.det(step.frame.B) - 1) < 1e-13
    # the tilt undoes the stretch, leaving a second-order remainder
    assert step.after.excess < 0.1 * step.before.excess
    assert step.passed


def test_iteration_identity_stays_zero():
    state = campanato_iterate(linear_instance(np.eye(2)), 0.5, CFG, K=3)
    assert state.excess_history == [0.0] * 4
    assert state.passed


def test_iteration_translation_is_flat_after_one_step():
    state = campanato_iterate(translation_instance([0.05, 0.0]), 0.5, CFG, K=2)
    assert state.excess_history[0] == pytest.approx(0.01, rel=1e-12)
    assert state.excess_history[1] < 1e-20
    assert state.passed


def test_iteration_smooth_decays(smooth):
    pair, sol = smooth
    state = campanato_iterate(MapInstance.from_solution(sol, pair), 0.5, CFG, K=3)
    E = state.excess_history
    assert state.breakdown is None
    for a, b in zip(E, E[1:]):
        assert b <= CFG.theta ** (2 * CFG.alpha) * a
    assert state.passed


def test_iteration_reports_breakdown():
    inst = linear_instance(np.diag([2.0, 0.5]))
    state = campanato_iterate(inst, 1.0, CFG, K=3)
    assert state.breakdown == 0
    assert not state.passed


def test_decay_csv_layout(tmp_path):
    state = campanato_iterate(linear_instance(np.eye(2)), 0.5, CFG, K=2)
    path = tmp_path / "decay.csv"
    write_decay_csv(state, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("k,R_k,excess")
    assert len(lines) == 4


def test_campanato_quantity_vanishes_on_affine_maps():
    T = lambda x: np.atleast_2d(x) @ np.array([[1.2, 0.1], [0.1, 0.9]]).T + 0.3  # noqa: E731
    assert campanato_quantity(T, 0.5, 0.5) < 1e-25
    assert campanato_quantity(lambda x: np.atleast_2d(x) ** 2, 0.5, 0.5) > 0


# classification ------------------------------------------------------------


def test_classification_identity_all_regular(identity, tmp_path):
    pair, sol = identity
    pts, shape = scan_grid(-0.5, 0.5, 6)
    cl = classify_regular_points(sol, pair, CFG, pts, shape)
    assert cl.regular_fraction == 1.0
    cl.write_csv(tmp_path / "classify.csv")
    lines = (tmp_path / "classify.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,criterion,label"
    assert len(lines) == 37


def test_classification_crease_flags_a_band(crease):
    pair, sol = crease
    pts, shape = scan_grid(-0.5, 0.5, 9)
    cl = classify_regular_points(sol, pair, CFG, pts, shape)
    flagged = pts[cl.labels == "singular"]
    assert 0 < len(flagged) < len(pts)
    assert np.all(np.abs(flagged[:, 0]) < 0.25)
    assert cl.flagged_components() == 1
