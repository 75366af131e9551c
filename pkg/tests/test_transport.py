import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otreg.density import DensityPair, generate_test_density
from otreg.transport import (TransportSolution, brute_force_matching, check_monotonicity,
                             inverse_consistency, linfty_bound_check, quantize, solve_ot,
                             solve_points)


def permutation_oracle(x, y):
    best = np.inf
    for p in itertools.permutations(range(len(x))):
        best = min(best, float(np.sum((x - y[list(p)]) ** 2)))
    return best


def test_identity_matching_has_zero_cost():
    u = generate_test_density("uniform", n=32)
    sol = solve_ot(DensityPair(u, u), 256)
    assert np.array_equal(sol.perm, np.arange(256)) and sol.cost == 0.0


def test_two_point_example():
    sol = solve_points([[0, 0], [1, 0]], [[0, 1], [1, 1]], masses=1.0)
    assert list(sol.perm) == [0, 1]
    assert sol.cost == 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_exact_against_permutation_oracle(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    sol = solve_points(x, y, masses=1.0)
    assert sol.cost == pytest.approx(permutation_oracle(x, y), rel=1e-12, abs=1e-14)
    _, bf = brute_force_matching(x, y, masses=1.0)
    assert bf == pytest.approx(permutation_oracle(x, y), rel=1e-12, abs=1e-14)


def test_plan_marginals_and_cost(smooth):
    pair, sol = smooth
    P = sol.plan().tocsr()
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), sol.masses, rtol=1e-9)
    assert np.allclose(np.asarray(P.sum(axis=0)).ravel(), sol.masses, rtol=1e-9)
    direct = float(np.sum(sol.masses * np.sum((sol.map - sol.sources) ** 2, axis=1)))
    assert sol.cost == pytest.approx(direct, rel=1e-12)
    assert sol.masses.sum() == pytest.approx(pair.rho0.mass, rel=1e-12)


def test_quantisation_of_uniform_is_lattice():
    u = generate_test_density("uniform", n=32)
    pts, m, shape = quantize(u, 64)
    assert shape == (8, 8)
    assert np.allclose(m, 4 / 64)
    assert np.allclose(np.unique(np.round(pts[:, 0], 12)), -1 + 0.125 + 0.25 * np.arange(8))


def test_monotonicity_identity_and_shift():
    g = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0)), -1).reshape(-1, 2)
    ident = TransportSolution.from_map(g, g, 1.0)
    shifted = TransportSolution.from_map(g, g + [0.3, -0.2], 1.0)
    d2 = min(np.sum((a - b) ** 2) for a, b in itertools.combinations(g, 2))
    assert check_monotonicity(ident).min_inner_product == pytest.approx(d2)
    assert check_monotonicity(shifted).min_inner_product == pytest.approx(d2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solver_output_is_monotone(seed):
    rng = np.random.default_rng(seed)
    sol = solve_points(rng.uniform(-1, 1, (128, 2)), rng.normal(size=(128, 2)))
    rep = check_monotonicity(sol)
    assert rep.min_inner_product >= -1e-12 and rep.violating_pairs == 0
    assert inverse_consistency(sol) == 0


def test_linfty_identity():
    u = generate_test_density("uniform", n=32)
    sol = solve_ot(DensityPair(u, u), 256)
    rep = linfty_bound_check(sol, 0.5)
    assert rep.sup_displacement == 0 and rep.inclusion_inner and rep.inclusion_preimage


def test_linfty_shift_family_ratio_bounded():
    ratios = []
    for k in range(1, 5):
        eps = 4.0**-k
        kw = dict(n=64, alpha=0.5, support="disk", support_radius=1.0)
        r0 = generate_test_density("uniform", **kw)
        r1 = generate_test_density("uniform", shift=(eps, 0.0), **kw)
        sol = solve_ot(DensityPair(r0, r1), 1024)
        rep = linfty_bound_check(sol, 1.0)
        # interior atoms move by exactly eps; both directions are summed
        assert rep.sup_forward == pytest.approx(eps, rel=1e-9)
        assert rep.energy == pytest.approx(eps**2 * sol.masses[np.hypot(*sol.sources.T) <= 1].sum(),
                                           rel=1e-9)
        ratios.append(rep.ratio)
    assert max(ratios) / min(ratios) < 20 and np.all(np.isfinite(ratios))


def test_map_extension_is_exact_on_atoms(smooth):
    _, sol = smooth
    assert np.allclose(sol.map_at(sol.sources), sol.map, atol=1e-12)
    assert np.allclose(sol.inverse_at(sol.targets), sol.inverse_map, atol=1e-12)
