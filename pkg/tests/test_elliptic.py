import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otreg.batteries import fitted_slope
from otreg.elliptic import (HarmonicField, flux_coefficients, gradient_energy, harmonic_estimate_suite,
                            harmonic_from_modes, pohozaev_check, solve_neumann_laplace,
                            solve_neumann_poisson)

TH = 2 * np.pi * np.arange(128) / 128


def polar(pts):
    return np.hypot(*pts.T), np.arctan2(pts[:, 1], pts[:, 0])


@pytest.fixture
def pts(rng):
    r = np.sqrt(rng.uniform(0, 0.95, 200))
    t = rng.uniform(0, 2 * np.pi, 200)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def test_mode_one(pts):
    phi = solve_neumann_laplace(np.cos(TH))
    r, t = polar(pts)
    assert np.allclose(phi.value(pts), r * np.cos(t), atol=1e-12)
    assert np.allclose(phi.gradient_at_origin(), [1, 0], atol=1e-14)
    assert np.allclose(phi.hessian_at_origin(), 0, atol=1e-14)


def test_mode_two(pts):
    phi = solve_neumann_laplace(np.cos(2 * TH))
    r, t = polar(pts)
    assert np.allclose(phi.value(pts), r**2 / 2 * np.cos(2 * t), atol=1e-12)
    assert np.allclose(phi.gradient_at_origin(), 0, atol=1e-14)
    assert np.allclose(phi.hessian_at_origin(), np.diag([1, -1]), atol=1e-13)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_mode_energy_matches_boundary_pairing(n):
    phi = solve_neumann_laplace(np.cos(n * TH))
    bdry = np.column_stack([np.cos(TH), np.sin(TH)])
    pairing = np.sum(np.cos(n * TH) * phi.value(bdry)) * 2 * np.pi / len(TH)
    assert phi.energy() == pytest.approx(np.pi / n, rel=1e-12)
    assert pairing == pytest.approx(np.pi / n, rel=1e-12)
    # independent polar quadrature of |grad phi|^2
    assert gradient_energy(phi, 0.0, 1.0, n_r=64, n_t=128) == pytest.approx(np.pi / n, rel=1e-8)


def test_hessian_and_gradient_match_finite_differences(pts):
    rng = np.random.default_rng(3)
    phi = harmonic_from_modes(rng.normal(size=5), rng.normal(size=5), radius=1.3)
    h = 1e-5
    e = np.eye(2) * h
    fd = np.stack([(phi.value(pts + e[i]) - phi.value(pts - e[i])) / (2 * h) for i in range(2)], 1)
    assert np.allclose(phi.gradient(pts), fd, atol=1e-8)
    fdh = np.stack([(phi.gradient(pts + e[i]) - phi.gradient(pts - e[i])) / (2 * h) for i in range(2)], 1)
    assert np.allclose(phi.hessian(pts), fdh, atol=1e-7)
    assert np.allclose(np.trace(phi.hessian(pts), axis1=1, axis2=2), 0, atol=1e-12)


def test_flux_mean_is_removed():
    a, b, mean = flux_coefficients(0.7 + np.cos(3 * TH))
    assert mean == pytest.approx(0.7)
    assert a[2] == pytest.approx(1.0) and np.allclose(np.delete(a, 2), 0, atol=1e-14)
    assert np.allclose(b, 0, atol=1e-14)


def test_poisson_zero_source():
    fld = solve_neumann_poisson(lambda p: np.zeros(len(p)), n_modes=8, radial_res=16)
    assert np.allclose(fld.gradient(np.array([[0.2, 0.3], [0.0, -0.5]])), 0, atol=1e-14)


def test_poisson_linear_source(pts):
    c = 2.0
    fld = solve_neumann_poisson(lambda p: c * p[:, 0], n_modes=8, radial_res=128)
    r, t = polar(pts)
    exact = c / 8 * (3 * r - r**3) * np.cos(t)
    v = fld.value(pts)
    assert np.max(np.abs(v - v.mean() - (exact - exact.mean()))) < 1e-4
    assert np.allclose(fld.gradient_at_origin(), [3 * c / 8, 0], atol=1e-3)


def test_poisson_constant_source():
    c = 1.5
    fld = solve_neumann_poisson(lambda p: np.full(len(p), c), n_modes=8, radial_res=128)
    p = np.array([[0.3, 0.1], [0.0, 0.9], [-0.6, -0.2]])
    g = fld.gradient(p)
    assert np.allclose(g, -c * p / 2, atol=1e-4)
    bd = np.column_stack([np.cos(TH), np.sin(TH)]) * (1 - 1e-9)
    flux = np.sum(fld.gradient(bd) * bd, axis=1)
    assert np.allclose(flux, -c / 2, atol=1e-4)


def test_poisson_residual_order():
    src = lambda p: np.sin(1.3 * p[:, 0]) * np.cos(0.7 * p[:, 1]) + p[:, 0] * p[:, 1]  # noqa: E731
    levels = (32, 64, 128)
    res = [solve_neumann_poisson(src, 16, n).particular.laplacian_residual() for n in levels]
    assert fitted_slope(1 / np.array(levels, float), res) >= 1.8


def test_estimate_suite_mode_one_and_zero():
    rows = {r.quantity: r for r in harmonic_estimate_suite(harmonic_from_modes([1.0], [0.0]), 0.25)}
    assert rows["energy_vs_flux"].ratio == pytest.approx(1.0, rel=1e-12)
    zero = harmonic_estimate_suite(harmonic_from_modes([], []), 0.25)
    assert all(r.value == 0 for r in zero)


def test_annulus_ratio_uniformly_bounded():
    ratios = []
    for n in range(1, 17):
        a = np.zeros(n)
        a[-1] = 1.0
        fld = harmonic_from_modes(a, np.zeros(n))
        for r in (0.125, 0.25, 0.5):
            row = [x for x in harmonic_estimate_suite(fld, r) if x.quantity == "annulus_energy_vs_r_flux"][0]
            # closed form: (1 - (1-r)^{2n}) / (n r) <= 2
            assert row.ratio == pytest.approx((1 - (1 - r) ** (2 * n)) / (n * r), rel=1e-12)
            ratios.append(row.ratio)
    assert max(ratios) <= 2.0


def test_pohozaev_mode_one():
    rep = pohozaev_check(harmonic_from_modes([1.0], [0.0]))
    assert rep.tangential == pytest.approx(np.pi, rel=1e-14)
    assert rep.normal == pytest.approx(np.pi, rel=1e-14)


def test_pohozaev_zero():
    rep = pohozaev_check(harmonic_from_modes([], []))
    assert rep.lhs == rep.tangential == rep.normal == 0


@settings(max_examples=16, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_pohozaev_mixture(a, b):
    rep = pohozaev_check(harmonic_from_modes(a, b))
    assert rep.relative_gap <= 1e-10


def test_addition_of_fields(pts):
    f = harmonic_from_modes([1.0, 0.5], [0.0, 0.2])
    g = harmonic_from_modes([0.0, 0.0, 1.0], [0.3])
    s = f + g
    assert isinstance(s, HarmonicField)
    assert np.allclose(s.value(pts), f.value(pts) + g.value(pts), atol=1e-13)
