"""Boundary-layer correctors, the glued competitor and the energy-gap diagnostics.

Everything here lives on a disk ``B_R`` around a centre ``c``; the layer is
the annulus ``A_r = B_R minus B_{R(1-r)}``. Boundary fluxes are sampled at
``K`` uniform angles ``theta_k = 2 pi k / K`` and at the interpolant's times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .density import DensityPair, bilinear
from .elliptic import HarmonicField, solve_neumann_laplace, solve_neumann_poisson
from .errors import DomainError, HypothesisViolation
from .eulerian import Interpolant, ball_weights

DEFAULT_THETA = 128
LAYER_MULTIPLIER = 8.0


def _trapezoid_weights(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    w = np.zeros(len(t))
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def _gauss(a: float, b: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


# ---------------------------------------------------------------------------
# Trace inequality


@dataclass(frozen=True)
class TraceReport:
    lhs: float
    grad_term: float
    time_term: float

    @property
    def ratio(self) -> float:
        rhs = self.grad_term + self.time_term
        if rhs == 0:
            return 0.0 if self.lhs == 0 else np.inf
        return self.lhs / rhs


def trace_check(psi, r: float, n_r: int = 16, n_theta: int = DEFAULT_THETA, n_t: int = 16,
                step: float = 1e-6) -> TraceReport:
    """Both sides of the space-time trace inequality on the unit annulus ``A_r``.

    ``psi(points, t)`` is evaluated at Gauss nodes in radius and time and
    uniform angles; derivatives are central differences with ``step``.
    ``lhs = (int_0^1 int_{dB} (psi - mean_t psi)^2)^{1/2}``, the right side is
    ``r^{1/2} ||grad psi||_{L2(A_r x (0,1))} + r^{-3/2} ||d_t psi||_{L1}``.
    """
    if not 0 < r < 1:
        raise DomainError(f"r must lie in (0, 1), got {r}")
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    t, wt = _gauss(0.0, 1.0, n_t)
    circ = np.column_stack([np.cos(th), np.sin(th)])
    B = np.stack([psi(circ, tk) for tk in t])  # (n_t, n_theta)
    v = B - wt @ B
    lhs = np.sqrt(np.sum(wt[:, None] * v**2) * 2 * np.pi / n_theta)

    rr, wr = _gauss(1 - r, 1.0, n_r)
    R, T = np.meshgrid(rr, th, indexing="ij")
    pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    wa = (wr * rr)[:, None].repeat(n_theta, axis=1).ravel() * 2 * np.pi / n_theta
    ex, ey = np.array([step, 0.0]), np.array([0.0, step])
    g2 = 0.0
    dt1 = 0.0
    for tk, w in zip(t, wt):
        gx = (psi(pts + ex, tk) - psi(pts - ex, tk)) / (2 * step)
        gy = (psi(pts + ey, tk) - psi(pts - ey, tk)) / (2 * step)
        ps = (psi(pts, tk + step) - psi(pts, tk - step)) / (2 * step)
        g2 += w * np.dot(wa, gx**2 + gy**2)
        dt1 += w * np.dot(wa, np.abs(ps))
    return TraceReport(float(lhs), float(np.sqrt(r * g2)), float(dt1 / r**1.5))


# ---------------------------------------------------------------------------
# Correctors


@dataclass(frozen=True, eq=False)
class Corrector:
    """An element ``(s, q)`` of the layer class for outer flux ``f(theta, t)``.

    ``coeffs[k, n]`` are complex Fourier coefficients of ``f(., t_k)``
    (``f = sum_n Re(coeffs[:, n] e^{i n theta})``, ``n = 0..N``).
    ``method`` is ``"neumann"`` (per-time annulus Neumann problems, ``s``
    constant in space) or ``"layer"`` (radial ramp of the flux across the
    layer).
    """

    r: float
    radius: float
    times: np.ndarray
    coeffs: np.ndarray
    method: str

    @property
    def inner(self) -> float:
        return self.radius * (1 - self.r)

    @property
    def area(self) -> float:
        return np.pi * (self.radius**2 - self.inner**2)

    @property
    def n_max(self) -> int:
        return self.coeffs.shape[1] - 1

    def flux(self, theta, k: int) -> np.ndarray:
        n = np.arange(self.n_max + 1)
        return (np.exp(1j * np.outer(np.atleast_1d(theta), n)) @ self.coeffs[k]).real

    def _cum(self) -> np.ndarray:
        """``int_0^{t_k} f`` coefficientwise."""
        return cumulative_trapezoid(self.coeffs, self.times, axis=0, initial=0.0)

    def s(self, points, k: int) -> np.ndarray:
        pts = np.atleast_2d(points)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        inside = (rho >= self.inner) & (rho <= self.radius)
        out = np.zeros(len(pts))
        C = self._cum()[k]
        if self.method == "neumann":
            out[inside] = -2 * np.pi * self.radius * C[0].real / self.area
        else:
            th = np.arctan2(pts[inside, 1], pts[inside, 0])
            n = np.arange(self.n_max + 1)
            F = (np.exp(1j * np.outer(th, n)) @ C).real
            rr = rho[inside]
            out[inside] = -(2 * rr - self.inner) / (self.r * self.radius * rr) * F
        return out

    def q(self, points, k: int) -> np.ndarray:
        pts = np.atleast_2d(points)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        inside = (rho >= self.inner) & (rho <= self.radius)
        out = np.zeros((len(pts), 2))
        if not inside.any():
            return out
        rr = rho[inside]
        th = np.arctan2(pts[inside, 1], pts[inside, 0])
        qr, qt = self._polar_q(rr, th, k)
        c, s = np.cos(th), np.sin(th)
        out[inside, 0] = c * qr - s * qt
        out[inside, 1] = s * qr + c * qt
        return out

    def _polar_q(self, rr, th, k):
        R, a = self.radius, self.inner
        F = self.coeffs[k]
        n = np.arange(self.n_max + 1)
        E = np.exp(1j * np.outer(th, n))
        if self.method == "layer":
            chi = (rr - a) / (R - a)
            return chi * (E @ F).real, np.zeros_like(rr)
        # mode 0: u' = c (rho^2 - a^2) / (2 rho), with u'(R) = F_0
        c0 = 2 * R * F[0].real / (R**2 - a**2)
        qr = c0 * (rr**2 - a**2) / (2 * rr)
        qt = np.zeros_like(rr)
        x = rr / R
        xa = a / R
        for m in range(1, self.n_max + 1):
            if F[m] == 0:
                continue
            # u_m = R alpha (x^m + xa^{2m} x^{-m}) with u_m'(R) = F_m, u_m'(a) = 0
            alpha = F[m] / (m * (1 - xa ** (2 * m)))
            U = R * alpha * (x**m + xa ** (2 * m) * x ** (-m))
            dU = alpha * m * (x ** (m - 1) - xa ** (2 * m) * x ** (-m - 1))
            qr += (dU * E[:, m]).real
            qt += (1j * m * U / rr * E[:, m]).real
        return qr, qt

    def energy(self, n_r: int = 32, n_theta: int | None = None) -> float:
        """``int_0^1 int_{A_r} |q|^2 / 2``."""
        nt = n_theta or max(4 * self.n_max + 8, 64)
        rr, wr = _gauss(self.inner, self.radius, n_r)
        th = 2 * np.pi * np.arange(nt) / nt
        R, T = np.meshgrid(rr, th, indexing="ij")
        Rf, Tf = R.ravel(), T.ravel()
        wa = (wr * rr)[:, None].repeat(nt, axis=1).ravel() * 2 * np.pi / nt
        wt = _trapezoid_weights(self.times)
        e = 0.0
        for k in range(len(self.times)):
            if wt[k] == 0:
                continue
            qr, qt = self._polar_q(Rf, Tf, k)
            e += wt[k] * np.dot(wa, qr**2 + qt**2)
        return 0.5 * float(e)

    def flux_l2_sq(self) -> float:
        """``int_0^1 int_{dB_R} f^2`` (Parseval per time, trapezoid in time)."""
        c = self.coeffs
        per = np.abs(c[:, 0]) ** 2 * 2 * np.pi * self.radius
        per = per + np.pi * self.radius * np.sum(np.abs(c[:, 1:]) ** 2, axis=1)
        return float(_trapezoid_weights(self.times) @ per)

    def max_abs_s(self) -> float:
        C = np.abs(self._cum())
        if self.method == "neumann":
            return float(np.max(2 * np.pi * self.radius * C[:, 0] / self.area))
        amp = np.max(np.sum(C, axis=1))  # bound on |int_0^t f|
        return float((1 + self.r) / (self.r * self.radius) * amp)

    def defects(self, n_theta: int = DEFAULT_THETA) -> dict[str, float]:
        """L2 defects of the boundary and endpoint conditions."""
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        nu = np.column_stack([np.cos(th), np.sin(th)])
        wt = _trapezoid_weights(self.times)
        ds_out = 2 * np.pi * self.radius / n_theta
        ds_in = 2 * np.pi * self.inner / n_theta
        eps = 1e-12 * self.radius
        outer = inner = 0.0
        for k in range(len(self.times)):
            qo = self.q(nu * (self.radius - eps), k)
            qi = self.q(nu * (self.inner + eps), k)
            outer += wt[k] * ds_out * np.sum((np.sum(qo * nu, axis=1) - self.flux(th, k)) ** 2)
            inner += wt[k] * ds_in * np.sum(np.sum(qi * nu, axis=1) ** 2)
        mid = nu * 0.5 * (self.radius + self.inner)
        return {
            "outer_flux": float(np.sqrt(outer)),
            "inner_flux": float(np.sqrt(inner)),
            "s_start": float(np.max(np.abs(self.s(mid, 0)))),
            "s_end": float(np.max(np.abs(self.s(mid, len(self.times) - 1)))),
        }

    def continuity_defect(self, n_r: int = 8, n_theta: int = 32) -> float:
        """``max |d_t s + div q|`` at interior layer points (finite differences)."""
        rr = np.linspace(self.inner, self.radius, n_r + 2)[1:-1]
        th = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
        R, T = np.meshgrid(rr, th, indexing="ij")
        pts = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
        hstep = 1e-6 * self.radius
        ex, ey = np.array([hstep, 0.0]), np.array([0.0, hstep])
        worst = 0.0
        for k in range(len(self.times)):
            div = ((self.q(pts + ex, k)[:, 0] - self.q(pts - ex, k)[:, 0])
                   + (self.q(pts + ey, k)[:, 1] - self.q(pts - ey, k)[:, 1])) / (2 * hstep)
            # d_t s = -(coefficient of the current flux), exactly by construction
            if self.method == "neumann":
                st = -2 * np.pi * self.radius * self.coeffs[k, 0].real / self.area
            else:
                rho = np.hypot(pts[:, 0], pts[:, 1])
                th_p = np.arctan2(pts[:, 1], pts[:, 0])
                st = -(2 * rho - self.inner) / (self.r * self.radius * rho) * self.flux(th_p, k)
            worst = max(worst, float(np.max(np.abs(st + div))))
        return worst


def flux_modes(f_samples, n_modes: int | None = None) -> np.ndarray:
    """Complex per-time coefficients ``f = sum_n Re(c_n e^{i n theta})``."""
    f = np.atleast_2d(np.asarray(f_samples, dtype=float))
    K = f.shape[1]
    F = np.fft.rfft(f, axis=1) / K
    N = (K - 1) // 2 if n_modes is None else min(n_modes, (K - 1) // 2)
    c = F[:, :N + 1].copy()
    c[:, 1:] *= 2
    return c


def required_layer(coeffs, times, radius: float, method: str) -> float:
    """Smallest ``r`` with ``|s| <= 1/2`` for the given flux."""
    C = np.abs(cumulative_trapezoid(coeffs, times, axis=0, initial=0.0))
    if method == "neumann":
        m = float(np.max(C[:, 0])) * 2 / radius  # |s| = m / (r (2 - r))
        if m == 0:
            return 0.0
        # r (2 - r) >= 2 m
        disc = 1 - 2 * m
        return 1.0 if disc < 0 else float(1 - np.sqrt(disc))
    M = float(np.max(np.sum(C, axis=1))) / radius
    if M >= 0.5:
        return np.inf
    return M / (0.5 - M)


def construct_corrector(f_samples, times, r: float, radius: float = 1.0,
                        method: str = "neumann", n_modes: int | None = None,
                        tol: float = 1e-8) -> Corrector:
    """Build ``(s, q)`` for outer flux samples ``f_samples[k, l] = f(theta_l, t_k)``.

    Requires ``int_0^1 f dt = 0`` for every angle (trapezoid rule on
    ``times``). Raises :class:`HypothesisViolation` when ``|s|`` would exceed
    ``1/2``, naming the smallest admissible ``r``.
    """
    if method not in ("neumann", "layer"):
        raise DomainError(f"unknown corrector method {method!r}")
    if not 0 < r < 1:
        raise DomainError(f"r must lie in (0, 1), got {r}")
    times = np.asarray(times, dtype=float)
    f = np.atleast_2d(np.asarray(f_samples, dtype=float))
    if f.shape[0] != len(times):
        raise DomainError("f_samples needs one row per time")
    avg = _trapezoid_weights(times) @ f
    scale = max(1.0, float(np.max(np.abs(f))))
    if np.max(np.abs(avg)) > tol * scale:
        raise DomainError(f"time average of f is not zero (max {np.max(np.abs(avg)):.3e})")
    coeffs = flux_modes(f, n_modes)
    cor = Corrector(float(r), float(radius), times, coeffs, method)
    if cor.max_abs_s() > 0.5:
        need = required_layer(coeffs, times, radius, method)
        raise HypothesisViolation(
            f"|s| reaches {cor.max_abs_s():.3g} > 1/2; need r >= {need:.4g} (got {r})")
    return cor


def admissibility_threshold(cor: Corrector, multiplier: float = LAYER_MULTIPLIER) -> float:
    """``multiplier * (int int f^2)^{1/3}``, the smallness scale for ``r``."""
    return multiplier * cor.flux_l2_sq() ** (1.0 / 3.0)


@dataclass(frozen=True)
class CorrectorEnergyReport:
    energy: float
    r_times_flux: float
    threshold: float
    admissible: bool

    @property
    def ratio(self) -> float:
        if self.r_times_flux == 0:
            return 0.0
        return self.energy / self.r_times_flux


def corrector_energy_check(cor: Corrector, multiplier: float = LAYER_MULTIPLIER) -> CorrectorEnergyReport:
    thr = admissibility_threshold(cor, multiplier) / cor.radius
    return CorrectorEnergyReport(cor.energy(), cor.r * cor.flux_l2_sq(), thr, cor.r >= thr)


# ---------------------------------------------------------------------------
# Harmonic approximation data from an interpolant


def boundary_flux(interp: Interpolant, center, R: float, n_theta: int = DEFAULT_THETA) -> np.ndarray:
    """``f[k, l] = j(c + R nu_l, t_k) . nu_l`` from the smoothed slices."""
    sm = interp.smoothed()
    g = sm.grid
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    nu = np.column_stack([np.cos(th), np.sin(th)])
    pts = np.asarray(center, dtype=float) + R * nu
    out = np.empty((len(sm.times), n_theta))
    for k in range(len(sm.times)):
        jf = sm.flux_slices[k]
        out[k] = (bilinear(g.origin, g.h, jf[..., 0], pts) * nu[:, 0]
                  + bilinear(g.origin, g.h, jf[..., 1], pts) * nu[:, 1])
    return out


@dataclass(frozen=True, eq=False)
class HarmonicData:
    """``phi_tilde = phi + phi_hat`` on ``B_R(c)`` and the flux it was built from."""

    center: np.ndarray
    radius: float
    phi_tilde: HarmonicField
    f: np.ndarray  # (n_times, n_theta)
    fbar: np.ndarray

    @property
    def phi(self) -> HarmonicField:
        return self.phi_tilde.homogeneous()

    def grad(self, points) -> np.ndarray:
        return self.phi_tilde.gradient(np.atleast_2d(points) - self.center)


def build_tilde_phi(interp: Interpolant, pair: DensityPair, center, R: float,
                    n_theta: int = DEFAULT_THETA, n_modes: int = 32,
                    radial_res: int = 48) -> HarmonicData:
    """Solve ``-lap phi_tilde = rho1 - rho0`` in ``B_R(c)`` with flux ``fbar``.

    The harmonic part receives the mean-corrected ``fbar``; the Poisson part
    carries ``delta rho`` with its compatible constant flux.
    """
    c = np.asarray(center, dtype=float)
    f = boundary_flux(interp, c, R, n_theta)
    fbar = _trapezoid_weights(interp.times) @ f
    phi = solve_neumann_laplace(fbar, n_modes, R)

    def drho(x):
        return pair.rho1(x + c) - pair.rho0(x + c)

    phat = solve_neumann_poisson(drho, n_modes, radial_res, R)
    return HarmonicData(c, float(R), phi + phat, f, fbar)


# ---------------------------------------------------------------------------
# Quasi-orthogonality, competitor and main estimate


def _ball_nodes(interp: Interpolant, center, R):
    g = interp.grid
    w = ball_weights(g, center, R) * g.h**2
    mask = w.ravel() > 0
    return g.nodes()[mask], w.ravel()[mask], mask


@dataclass(frozen=True)
class QuasiOrthogonalityReport:
    lhs: float
    rhs: float
    cross: float
    harmonic_energy: float
    ot_energy: float

    @property
    def defect(self) -> float:
        return self.lhs - self.rhs


def quasi_orthogonality_check(interp: Interpolant, hd: HarmonicData,
                              gamma: float = 0.0) -> QuasiOrthogonalityReport:
    """Both sides of the quasi-orthogonality inequality on ``B_R(c)``.

    ``cross = int int_B (j - grad phi_tilde) . grad phi_tilde`` vanishes in
    the continuum; its size measures the discretisation error.
    """
    pts, w, mask = _ball_nodes(interp, hd.center, hd.radius)
    G = hd.grad(pts)
    g2 = np.sum(G * G, axis=1)
    wt = interp.time_weights()
    lhs = ot = cross = 0.0
    for k in range(len(interp.times)):
        rho = interp.rho_slices[k].values.ravel()[mask]
        j = interp.flux_slices[k].reshape(-1, 2)[mask]
        pos = rho > 0
        diff = j - rho[:, None] * G
        lhs += wt[k] * np.sum(w[pos] * np.sum(diff[pos] ** 2, axis=1) / rho[pos])
        ot += wt[k] * np.sum(w[pos] * np.sum(j[pos] ** 2, axis=1) / rho[pos])
        cross += wt[k] * np.sum(w * np.sum((j - G) * G, axis=1))
    harm = float(np.sum(w * g2))
    return QuasiOrthogonalityReport(float(lhs), float(ot - (1 - gamma) * harm), float(cross),
                                    harm, float(ot))


@dataclass(frozen=True, eq=False)
class Competitor:
    """Glued pair sampled at the interpolant's ball nodes and times."""

    points: np.ndarray
    weights: np.ndarray
    times: np.ndarray
    rho: np.ndarray  # (n_times, n_points)
    j: np.ndarray  # (n_times, n_points, 2)
    corrector: Corrector

    def energy(self) -> float:
        q = np.sum(self.j**2, axis=-1) / self.rho
        return float(_trapezoid_weights(self.times) @ (q @ self.weights))

    def min_density(self) -> float:
        return float(self.rho.min())


def assemble_competitor(hd: HarmonicData, interp: Interpolant, pair: DensityPair, r: float,
                        method: str = "layer") -> Competitor:
    """``(t rho1 + (1-t) rho0 + s, grad phi_tilde + q)`` on ``B_R(c)``.

    The corrector takes the fluctuation ``f - fbar`` of the interpolant's
    boundary flux. Raises :class:`HypothesisViolation` if the density drops
    below ``1/4``.
    """
    cor = construct_corrector(hd.f - hd.fbar, interp.times, r, hd.radius, method)
    pts, w, _ = _ball_nodes(interp, hd.center, hd.radius)
    local = pts - hd.center
    r0 = pair.rho0(pts)
    r1 = pair.rho1(pts)
    G = hd.grad(pts)
    nt = len(interp.times)
    rho = np.empty((nt, len(pts)))
    j = np.empty((nt, len(pts), 2))
    for k, t in enumerate(interp.times):
        rho[k] = t * r1 + (1 - t) * r0 + cor.s(local, k)
        j[k] = G + cor.q(local, k)
    if rho.min() < 0.25:
        raise HypothesisViolation(f"competitor density {rho.min():.3g} below 1/4")
    return Competitor(pts, w, np.asarray(interp.times), rho, j, cor)


@dataclass(frozen=True)
class MainEstimateReport:
    ot_energy: float
    harmonic_energy: float
    competitor_energy: float
    gap: float
    superlinear_bound: float
    minimal: bool

    @property
    def ratio(self) -> float:
        return self.gap / self.superlinear_bound if self.superlinear_bound else np.inf


def main_estimate_check(interp: Interpolant, comp: Competitor, hd: HarmonicData,
                        excess: float, gamma: float = 0.0, rtol: float = 1e-12) -> MainEstimateReport:
    """Energy gap ``int int |j|^2/rho - int |grad phi_tilde|^2`` and minimality.

    Both energies use the same cell weights and time rule. ``minimal`` holds
    when the OT energy does not exceed the competitor's (up to ``rtol``
    relative rounding).
    """
    qo = quasi_orthogonality_check(interp, hd, gamma)
    ce = comp.energy()
    gap = qo.ot_energy - qo.harmonic_energy
    bound = excess ** (4.0 / 3.0) + gamma**2
    minimal = qo.ot_energy <= ce * (1 + rtol)
    return MainEstimateReport(qo.ot_energy, qo.harmonic_energy, ce, gap, bound, minimal)
