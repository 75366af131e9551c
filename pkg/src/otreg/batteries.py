"""Seeded invariant batteries for the elliptic, trace, corrector and transport layers.

Each battery returns :class:`BatteryRow` records. ``hard`` rows are exact
identities whose failure is a numeric error; the others are ratios checked
against the fixed constants below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary_layer import construct_corrector, trace_check
from .elliptic import (harmonic_estimate_suite, harmonic_from_modes, pohozaev_check,
                       solve_neumann_laplace, solve_neumann_poisson)
from .errors import DomainError
from .transport import brute_force_matching, check_monotonicity, inverse_consistency, solve_points

# Bounds for the battery ratios. The estimates only hold up to dimensional
# constants; these are the values the batteries certify against.
C_ENERGY = 1.0
C_INTERIOR = 200.0
C_ANNULUS = 2.0
C_POISSON = 50.0
C_TRACE = 2.0
C_LAYER = 1.0
IDENTITY_TOL = 1e-8
TRACE_STABILITY = 0.10
CORRECTOR_TOL = 1e-6
SLOPE_WINDOW = (0.7, 1.3)
BATTERIES = ("elliptic", "trace", "corrector", "transport")


@dataclass(frozen=True)
class BatteryRow:
    case_id: str
    quantity: str
    value: float
    bound: float
    hard: bool = False

    @property
    def ratio(self) -> float:
        if self.bound == 0:
            return 0.0 if self.value == 0 else np.inf
        return self.value / self.bound

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.bound)


def write_battery_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("case_id,quantity,value,bound,ratio,pass\n")
        for r in rows:
            fh.write(f"{r.case_id},{r.quantity},{r.value:.17g},{r.bound:.17g},"
                     f"{r.ratio:.17g},{int(r.passed)}\n")


def fitted_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------


def _random_modes(rng, n_modes: int):
    decay = 1.0 / np.arange(1, n_modes + 1)
    return rng.standard_normal(n_modes) * decay, rng.standard_normal(n_modes) * decay


def poisson_refinement_order(levels=(32, 64, 128)) -> tuple[float, list]:
    """Observed order of the Poisson solver for ``g = x1``, exact ``u = x1 (3 - r^2) / 8``."""
    errs = []
    src = lambda p: p[:, 0]  # noqa: E731
    pts = np.array([[0.3, 0.2], [-0.5, 0.1], [0.1, -0.7], [0.6, 0.6]])
    exact = pts[:, 0] * (3 - np.sum(pts**2, axis=1)) / 8
    for n in levels:
        fld = solve_neumann_poisson(src, n_modes=8, radial_res=n)
        v = fld.particular.value(pts)
        v = v - v.mean() + exact.mean()
        errs.append(float(np.max(np.abs(v - exact))))
    h = 1.0 / np.asarray(levels, dtype=float)
    return fitted_slope(h, errs), errs


def elliptic_battery(seed: int = 0, n_mixtures: int = 16) -> list[BatteryRow]:
    rng = np.random.default_rng(seed)
    rows = []
    pts = rng.uniform(-0.7, 0.7, size=(64, 2))
    r, th = np.hypot(*pts.T), np.arctan2(pts[:, 1], pts[:, 0])
    for n in range(1, 9):
        for kind in ("cos", "sin"):
            a, b = np.zeros(n), np.zeros(n)
            (a if kind == "cos" else b)[n - 1] = 1.0
            th_s = 2 * np.pi * np.arange(64) / 64
            f = np.cos(n * th_s) if kind == "cos" else np.sin(n * th_s)
            fld = solve_neumann_laplace(f, 16)
            trig = np.cos(n * th) if kind == "cos" else np.sin(n * th)
            exact = r**n * trig / n
            err = float(np.max(np.abs(fld.value(pts) - exact)))
            rows.append(BatteryRow(f"mode_{kind}{n}", "closed_form_error", err, IDENTITY_TOL, True))
            ferr = float(np.max(np.abs(harmonic_from_modes(a, b).boundary_flux(th_s) - f)))
            rows.append(BatteryRow(f"mode_{kind}{n}", "flux_error", ferr, IDENTITY_TOL, True))
    for i in range(n_mixtures):
        a, b = _random_modes(rng, 8)
        fld = harmonic_from_modes(a, b)
        rows.append(BatteryRow(f"mix{i}", "pohozaev_gap", pohozaev_check(fld).relative_gap,
                               IDENTITY_TOL, True))
        for rr in (0.125, 0.25):
            for est in harmonic_estimate_suite(fld, rr):
                bound = {"energy_vs_flux": C_ENERGY, "interior_derivatives_vs_energy": C_INTERIOR,
                         "annulus_energy_vs_r_flux": C_ANNULUS}[est.quantity]
                rows.append(BatteryRow(f"mix{i}_r{rr:g}", est.quantity, est.ratio, bound))
    for i in range(4):
        k = rng.uniform(0.5, 2.0, size=2)
        src = lambda p, k=k: np.sin(k[0] * p[:, 0]) * np.cos(k[1] * p[:, 1])  # noqa: E731
        fld = solve_neumann_poisson(src, n_modes=16, radial_res=48)
        for est in harmonic_estimate_suite(fld, 0.25):
            if est.quantity.startswith("poisson"):
                rows.append(BatteryRow(f"poisson{i}", est.quantity, est.ratio, C_POISSON))
    order, _ = poisson_refinement_order()
    # order is a lower bound: report its deficit against 1.8
    rows.append(BatteryRow("poisson_refinement", "order_deficit", max(0.0, 1.8 - order), 0.0, True))
    return rows


def _trig_psi(rng, n_terms: int = 3):
    kx, ky = rng.integers(-3, 4, size=(2, n_terms))
    w = rng.uniform(0.5, 2.0, size=n_terms)
    ph = rng.uniform(0, 2 * np.pi, size=n_terms)
    amp = rng.standard_normal(n_terms)

    def psi(p, t):
        p = np.atleast_2d(p)
        arg = kx[None, :] * p[:, :1] + ky[None, :] * p[:, 1:2] + w[None, :] * t + ph[None, :]
        return np.sin(arg) @ amp

    return psi


def trace_battery(seed: int = 0, n_cases: int = 20) -> list[BatteryRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_cases):
        psi = _trig_psi(rng)
        for r in (0.125, 0.25):
            coarse = trace_check(psi, r, n_r=16, n_theta=128, n_t=16).ratio
            fine = trace_check(psi, r, n_r=24, n_theta=256, n_t=24).ratio
            cid = f"psi{i}_r{r:g}"
            rows.append(BatteryRow(cid, "ratio", fine, C_TRACE))
            rows.append(BatteryRow(cid, "refinement_change", abs(fine - coarse) / fine,
                                   TRACE_STABILITY))
    return rows


def corrector_battery(seed: int = 0, amplitude: float = 1e-3,
                      widths=(0.125, 0.1875, 0.25)) -> list[BatteryRow]:
    """Layer correctors for ``f = A cos(n theta)(t - 1/2)``, ``n = 1..8``."""
    rng = np.random.default_rng(seed)
    rows = []
    times = np.linspace(0.0, 1.0, 17)
    th = 2 * np.pi * np.arange(64) / 64
    for n in range(1, 9):
        phase = rng.uniform(0, 2 * np.pi)
        f = amplitude * np.cos(n * th + phase)[None, :] * (times - 0.5)[:, None]
        energies = []
        for r in widths:
            cor = construct_corrector(f, times, r, method="layer")
            cid = f"n{n}_r{r:g}"
            # defects relative to the flux and s scales
            fscale = np.sqrt(cor.flux_l2_sq())
            sscale = cor.max_abs_s()
            for name, val in cor.defects().items():
                scale = sscale if name.startswith("s_") else fscale
                rows.append(BatteryRow(cid, name, val / scale, CORRECTOR_TOL, True))
            rows.append(BatteryRow(cid, "continuity_defect", cor.continuity_defect() / fscale,
                                   CORRECTOR_TOL, True))
            e = cor.energy()
            energies.append(e)
            rows.append(BatteryRow(cid, "energy_vs_r_flux", e / (r * cor.flux_l2_sq()), C_LAYER))
        s = fitted_slope(widths, energies)
        rows.append(BatteryRow(f"n{n}", "energy_slope_deviation", abs(s - 1.0),
                               SLOPE_WINDOW[1] - 1.0))
    return rows


def transport_battery(seed: int = 0, n_instances: int = 200) -> list[BatteryRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        n = int(rng.integers(1, 8))
        x = rng.uniform(-1, 1, size=(n, 2))
        y = rng.uniform(-1, 1, size=(n, 2))
        sol = solve_points(x, y)
        _, best = brute_force_matching(x, y)
        rows.append(BatteryRow(f"exact{i}_n{n}", "cost_minus_oracle", abs(sol.cost - best), 0.0, True))
        rows.append(BatteryRow(f"exact{i}_n{n}", "inverse_mismatches",
                               float(inverse_consistency(sol)), 0.0, True))
    for i in range(5):
        x = rng.uniform(-1, 1, size=(256, 2))
        y = rng.normal(scale=0.5, size=(256, 2))
        rep = check_monotonicity(solve_points(x, y))
        rows.append(BatteryRow(f"monotone{i}", "negative_inner_product",
                               max(0.0, -rep.min_inner_product), 1e-12, True))
    return rows


def run_battery(name: str, seed: int = 0) -> list[BatteryRow]:
    fns = {"elliptic": elliptic_battery, "trace": trace_battery,
           "corrector": corrector_battery, "transport": transport_battery}
    if name not in fns:
        raise DomainError(f"unknown battery {name!r}; choose from {', '.join(BATTERIES)}")
    return fns[name](seed)
