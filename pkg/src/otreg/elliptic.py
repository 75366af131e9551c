"""Neumann problems on disks.

The harmonic part is spectral: with boundary flux
``f = sum_n a_n cos(n theta) + b_n sin(n theta)`` on ``dB_R`` the solution is
``phi = Re F(z)`` with ``F(z) = R sum_n (c_n / n) (z/R)^n`` and
``c_n = a_n - i b_n``, so every derivative is an exact power sum of ``F``.

The Poisson part ``-lap(phi_hat) = g`` with the compatible constant flux is
solved on a polar grid: FFT in the angle, second-order finite volumes in the
radius (cell-centred nodes ``r_i = (i + 1/2) dr``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .density import DIM, holder_seminorm_samples
from .errors import DomainError, NumericError

DEFAULT_MODES = 64


def _polar(points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts, np.hypot(pts[:, 0], pts[:, 1]), np.arctan2(pts[:, 1], pts[:, 0])


def _hessian_from_complex(F2: np.ndarray) -> np.ndarray:
    """Hessian of ``Re F`` given ``F''`` (analytic ``F``)."""
    H = np.empty((len(F2), 2, 2))
    H[:, 0, 0] = F2.real
    H[:, 1, 1] = -F2.real
    H[:, 0, 1] = H[:, 1, 0] = -F2.imag
    return H


@dataclass(frozen=True, eq=False)
class PoissonPart:
    """Polar-grid solution of ``-lap(u) = g`` in ``B_R`` with constant flux.

    ``modes[i, n]`` is the complex angular coefficient of ``u(r_i, .)`` such
    that ``u = sum_n Re(modes[:, n] e^{i n theta})``.
    """

    radius: float
    r_nodes: np.ndarray
    modes: np.ndarray
    flux: float
    source: object
    n_theta: int
    source_samples: np.ndarray = field(repr=False)

    def _splines(self):
        try:
            return self.__dict__["_spl"]
        except KeyError:
            pass
        r = self.r_nodes
        ext = np.concatenate([-r[::-1], r])
        spl = []
        for n in range(self.modes.shape[1]):
            sign = (-1.0) ** n
            vals = np.concatenate([sign * self.modes[::-1, n], self.modes[:, n]])
            spl.append(CubicSpline(ext, vals))
        self.__dict__["_spl"] = spl
        return spl

    def _polar_derivs(self, r, th):
        """``u, u_r, u_t, u_rr, u_rt, u_tt`` at polar points (t = theta)."""
        out = np.zeros((6, len(r)))
        for n, s in enumerate(self._splines()):
            A, A1, A2 = s(r), s(r, 1), s(r, 2)
            e = np.exp(1j * n * th)
            out[0] += (A * e).real
            out[1] += (A1 * e).real
            out[2] += (1j * n * A * e).real
            out[3] += (A2 * e).real
            out[4] += (1j * n * A1 * e).real
            out[5] += (-(n**2) * A * e).real
        return out

    def value(self, points):
        _, r, th = _polar(points)
        return self._polar_derivs(r, th)[0]

    def gradient(self, points):
        _, r, th = _polar(points)
        rr = np.maximum(r, 0.5 * self.r_nodes[0])  # polar terms are singular at 0
        u, ur, ut, *_ = self._polar_derivs(rr, th)
        c, s = np.cos(th), np.sin(th)
        return np.column_stack([c * ur - s * ut / rr, s * ur + c * ut / rr])

    def hessian(self, points):
        _, r, th = _polar(points)
        rr = np.maximum(r, 0.5 * self.r_nodes[0])  # polar terms are singular at 0
        u, ur, ut, urr, urt, utt = self._polar_derivs(rr, th)
        c, s = np.cos(th), np.sin(th)
        a = ur / rr + utt / rr**2
        b = urt / rr - ut / rr**2
        H = np.empty((len(rr), 2, 2))
        H[:, 0, 0] = c * c * urr + s * s * a - 2 * c * s * b
        H[:, 1, 1] = s * s * urr + c * c * a + 2 * c * s * b
        H[:, 0, 1] = H[:, 1, 0] = c * s * (urr - a) + (c * c - s * s) * b
        return H

    def laplacian_residual(self, n_r: int = 64, n_t: int = 64, inner: float = 0.1, outer: float = 0.9) -> float:
        """``max |lap(u) + g|`` at off-node interior points ``inner R < r < outer R``."""
        r = self.radius * np.linspace(inner, outer, n_r)
        r = r + 0.5 * (r[1] - r[0]) * 0.37  # stay off the radial nodes
        th = 2 * np.pi * (np.arange(n_t) + 0.5) / n_t
        Rg, Tg = np.meshgrid(r, th, indexing="ij")
        rr, tt = Rg.ravel(), Tg.ravel()
        u, ur, ut, urr, urt, utt = self._polar_derivs(rr, tt)
        lap = urr + ur / rr + utt / rr**2
        g = _eval_source(self.source, np.column_stack([rr * np.cos(tt), rr * np.sin(tt)]))
        return float(np.max(np.abs(lap + g)))


def _eval_source(g, pts):
    if callable(g):
        return np.asarray(g(pts), dtype=float)
    raise DomainError("Poisson source must be callable on (n, 2) point arrays")


@dataclass(frozen=True, eq=False)
class HarmonicField:
    """Spectral harmonic part on ``B_R`` plus an optional Poisson part.

    ``a[k], b[k]`` are the cosine/sine flux coefficients of mode ``n = k + 1``;
    ``flux_mean`` is the average that was removed from the raw flux data.
    """

    radius: float
    a: np.ndarray
    b: np.ndarray
    flux_mean: float = 0.0
    particular: PoissonPart | None = None

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n = max(len(a), len(b))
        object.__setattr__(self, "a", np.pad(a, (0, n - len(a))))
        object.__setattr__(self, "b", np.pad(b, (0, n - len(b))))

    @property
    def n_modes(self) -> int:
        return len(self.a)

    @property
    def c(self) -> np.ndarray:
        return self.a - 1j * self.b

    def homogeneous(self) -> "HarmonicField":
        return replace(self, particular=None)

    def __add__(self, other: "HarmonicField") -> "HarmonicField":
        if other.radius != self.radius:
            raise DomainError("cannot add fields on different disks")
        n = max(self.n_modes, other.n_modes)
        pad = lambda v: np.pad(v, (0, n - len(v)))  # noqa: E731
        parts = [p for p in (self.particular, other.particular) if p is not None]
        if len(parts) > 1:
            raise DomainError("at most one Poisson part per field")
        return HarmonicField(self.radius, pad(self.a) + pad(other.a), pad(self.b) + pad(other.b),
                             self.flux_mean + other.flux_mean, parts[0] if parts else None)

    # complex potential and derivatives
    def _w(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts[:, 0] + 1j * pts[:, 1]) / self.radius

    def _F(self, w, order: int):
        n = np.arange(1, self.n_modes + 1)
        c = self.c
        R = self.radius
        if self.n_modes == 0:
            return np.zeros_like(w)
        if order == 0:
            return R * P.polyval(w, np.concatenate([[0], c / n]))
        if order == 1:
            return P.polyval(w, c)
        if order == 2:
            return P.polyval(w, (c * (n - 1))[1:]) / R if self.n_modes > 1 else np.zeros_like(w)
        if order == 3:
            return (P.polyval(w, (c * (n - 1) * (n - 2))[2:]) / R**2
                    if self.n_modes > 2 else np.zeros_like(w))
        raise ValueError(order)

    def value(self, points) -> np.ndarray:
        v = self._F(self._w(points), 0).real
        if self.particular is not None:
            v = v + self.particular.value(points)
        return v

    def gradient(self, points) -> np.ndarray:
        F1 = self._F(self._w(points), 1)
        g = np.column_stack([F1.real, -F1.imag])
        if self.particular is not None:
            g = g + self.particular.gradient(points)
        return g

    def hessian(self, points) -> np.ndarray:
        H = _hessian_from_complex(self._F(self._w(points), 2))
        if self.particular is not None:
            H = H + self.particular.hessian(points)
        return H

    def third_norm_sq(self, points) -> np.ndarray:
        """``|grad^3 phi|^2`` of the harmonic part (all 8 ordered components)."""
        return 4.0 * np.abs(self._F(self._w(points), 3)) ** 2

    def gradient_at_origin(self) -> np.ndarray:
        return self.gradient(np.zeros((1, 2)))[0]

    def hessian_at_origin(self) -> np.ndarray:
        return self.hessian(np.zeros((1, 2)))[0]

    # integrals of the harmonic part
    def energy(self, rho: float | None = None) -> float:
        """``int_{B_rho} |grad phi|^2`` of the harmonic part (default ``rho = R``)."""
        R = self.radius
        rho = R if rho is None else rho
        n = np.arange(1, self.n_modes + 1)
        return float(np.pi * R**2 * np.sum((self.a**2 + self.b**2) * (rho / R) ** (2 * n) / n))

    def annulus_energy(self, r: float) -> float:
        """Energy in ``A_r = B_R minus B_{R(1-r)}``."""
        return self.energy() - self.energy(self.radius * (1 - r))

    def flux_l2_sq(self) -> float:
        """``int_{dB_R} f^2`` of the mean-free flux."""
        return float(np.pi * self.radius * np.sum(self.a**2 + self.b**2))

    def boundary_flux(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        n = np.arange(1, self.n_modes + 1)
        return np.cos(np.outer(th, n)) @ self.a + np.sin(np.outer(th, n)) @ self.b


def flux_coefficients(flux_samples, n_modes: int = DEFAULT_MODES) -> tuple[np.ndarray, np.ndarray, float]:
    """Fourier coefficients of uniformly spaced samples ``f(2 pi k / K)``."""
    f = np.asarray(flux_samples, dtype=float)
    K = len(f)
    if n_modes < 1:
        raise DomainError(f"n_modes must be >= 1, got {n_modes}")
    if K < 3:
        raise DomainError("need at least 3 boundary samples")
    F = np.fft.rfft(f) / K
    N = min(n_modes, (K - 1) // 2)
    a = 2 * F[1:N + 1].real
    b = -2 * F[1:N + 1].imag
    return a, b, float(F[0].real)


def solve_neumann_laplace(flux_samples, n_modes: int = DEFAULT_MODES, radius: float = 1.0) -> HarmonicField:
    """Harmonic ``phi`` in ``B_R`` with ``d phi / d nu = f - mean(f)``."""
    a, b, mean = flux_coefficients(flux_samples, n_modes)
    return HarmonicField(float(radius), a, b, mean)


def harmonic_from_modes(a, b, radius: float = 1.0) -> HarmonicField:
    return HarmonicField(float(radius), np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def solve_neumann_poisson(source, n_modes: int = DEFAULT_MODES, radial_res: int = 64,
                          radius: float = 1.0, tol: float = 1e-8) -> HarmonicField:
    """``-lap(phi_hat) = g`` in ``B_R``, ``d phi_hat / d nu = -(int g) / |dB_R|``.

    ``source`` is a callable on ``(n, 2)`` arrays (e.g. a :class:`GridDensity`
    or a difference of two). The solution is normalised to zero mean.
    """
    R = float(radius)
    M = max(2 * n_modes + 2, 8)
    dr = R / radial_res
    r = (np.arange(radial_res) + 0.5) * dr
    th = 2 * np.pi * np.arange(M) / M
    Rg, Tg = np.meshgrid(r, th, indexing="ij")
    pts = np.column_stack([(Rg * np.cos(Tg)).ravel(), (Rg * np.sin(Tg)).ravel()])
    g = _eval_source(source, pts).reshape(radial_res, M)
    if not np.all(np.isfinite(g)):
        raise DomainError("Poisson source has non-finite samples")
    G = np.fft.rfft(g, axis=1) / M
    G[:, 1:] *= 2.0
    nmax = min(n_modes, M // 2 - 1)
    G = G[:, :nmax + 1]

    rp = np.concatenate([r[1:] - 0.5 * dr, [R]])  # outer faces r_{i+1/2}
    rm = r - 0.5 * dr  # inner faces, rm[0] = 0
    # discrete compatibility: the flux makes the mode-0 system consistent
    flux = -float(np.sum(r * dr * G[:, 0].real)) / R
    U = np.zeros_like(G)
    for n in range(nmax + 1):
        diag = rp + rm + n**2 * dr**2 / r
        diag[-1] = rm[-1] + n**2 * dr**2 / r[-1]
        rhs = (r * dr**2 * G[:, n]).astype(complex)
        if n == 0:
            rhs[-1] += R * dr * flux
        ab = np.zeros((3, radial_res), dtype=complex)
        ab[0, 1:] = -rp[:-1]
        ab[1] = diag
        ab[2, :-1] = -rm[1:]
        if n == 0:
            # pin the last node; the dropped equation holds by compatibility
            ab[1, -1] = 1.0
            ab[2, -2] = 0.0
            rhs[-1] = 0.0
        U[:, n] = solve_banded((1, 1), ab, rhs)
        if n == 0:
            U[:, 0] -= np.sum(U[:, 0] * r) / np.sum(r)
            # verify the dropped equation
            last = -rm[-1] * (U[-1, 0] - U[-2, 0]) + R * dr * flux + r[-1] * dr**2 * G[-1, 0]
            scale = max(1.0, float(np.max(np.abs(r * dr**2 * G[:, 0]))) * radial_res)
            if abs(last) > tol * scale:
                raise NumericError(f"mode-0 compatibility residual {abs(last):.2e} exceeds tolerance")
    part = PoissonPart(R, r, U, flux, source, M, g)
    return HarmonicField(R, np.zeros(0), np.zeros(0), 0.0, part)


# ---------------------------------------------------------------------------
# Estimate suite


@dataclass(frozen=True)
class EstimateRow:
    quantity: str
    value: float
    bound: float

    @property
    def ratio(self) -> float:
        if self.bound == 0:
            return 0.0 if self.value == 0 else np.inf
        return self.value / self.bound


def disk_lattice(radius: float, n: int = 41) -> np.ndarray:
    s = np.linspace(-radius, radius, n)
    X, Y = np.meshgrid(s, s, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts[np.hypot(pts[:, 0], pts[:, 1]) <= radius * (1 + 1e-12)]


def _polar_quadrature(R_in: float, R_out: float, n_r: int = 48, n_t: int = 128):
    x, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (R_out - R_in) * x + 0.5 * (R_out + R_in)
    wr = 0.5 * (R_out - R_in) * w * r
    th = 2 * np.pi * np.arange(n_t) / n_t
    Rg, Tg = np.meshgrid(r, th, indexing="ij")
    W = np.repeat(wr[:, None], n_t, axis=1) * (2 * np.pi / n_t)
    pts = np.column_stack([(Rg * np.cos(Tg)).ravel(), (Rg * np.sin(Tg)).ravel()])
    return pts, W.ravel()


def gradient_energy(fld, R_in: float, R_out: float, n_r: int = 48, n_t: int = 128) -> float:
    """``int |grad u|^2`` over the annulus ``R_in < |x| < R_out`` by Gauss-trapezoid quadrature."""
    pts, w = _polar_quadrature(R_in, R_out, n_r, n_t)
    g = fld.gradient(pts)
    return float(np.dot(w, np.sum(g * g, axis=1)))


def harmonic_estimate_suite(fld: HarmonicField, r: float, alpha: float = 0.5,
                            lattice_n: int = 41) -> list[EstimateRow]:
    """Ratios of the interior harmonic/Poisson estimates for one field.

    Harmonic part: energy vs boundary flux, interior derivative sup on
    ``B_{R/2}`` vs energy, annulus energy vs ``r`` times flux. Poisson part:
    derivative sup, energy and annulus energy vs ``[g]_alpha^2``.
    """
    if not 0 < r <= 1:
        raise DomainError(f"annulus width r must lie in (0, 1], got {r}")
    R = fld.radius
    h = fld.homogeneous()
    rows = []
    E = h.energy()
    F2 = h.flux_l2_sq()
    rows.append(EstimateRow("energy_vs_flux", E, F2))
    pts = disk_lattice(R / 2, lattice_n)
    F1 = h._F(h._w(pts), 1)
    sup = float(np.max(h.third_norm_sq(pts) + 2 * np.abs(h._F(h._w(pts), 2)) ** 2 + np.abs(F1) ** 2))
    rows.append(EstimateRow("interior_derivatives_vs_energy", sup, E))
    rows.append(EstimateRow("annulus_energy_vs_r_flux", h.annulus_energy(r), r * F2))
    part = fld.particular
    if part is not None:
        nodes = np.column_stack([
            (part.r_nodes[:, None] * np.cos(2 * np.pi * np.arange(part.n_theta) / part.n_theta)).ravel(),
            (part.r_nodes[:, None] * np.sin(2 * np.pi * np.arange(part.n_theta) / part.n_theta)).ravel(),
        ])
        gs = holder_seminorm_samples(nodes, part.source_samples.ravel(), alpha) ** 2
        full = disk_lattice(R * (1 - 1e-9), lattice_n)
        grad = part.gradient(full)
        hess = part.hessian(full)
        psup = float(np.max(np.sum(hess**2, axis=(1, 2)) + np.sum(grad**2, axis=1)))
        rows.append(EstimateRow("poisson_derivatives_vs_holder", psup, gs))
        rows.append(EstimateRow("poisson_energy_vs_holder", gradient_energy(part, 0.0, R), gs))
        rows.append(EstimateRow("poisson_annulus_vs_r_holder", gradient_energy(part, R * (1 - r), R), r * gs))
    return rows


@dataclass(frozen=True)
class PohozaevReport:
    lhs: float
    tangential: float
    normal: float

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.tangential), abs(self.normal))
        if scale == 0:
            return 0.0
        return abs(self.tangential - self.normal - self.lhs) / scale


def pohozaev_check(fld: HarmonicField, n_quad: int | None = None) -> PohozaevReport:
    """Boundary energies ``int |grad_tau phi|^2`` and ``int (d_nu phi)^2`` on ``dB_R``.

    Trapezoid quadrature with more nodes than twice the mode count is exact.
    """
    h = fld.homogeneous()
    R = h.radius
    M = n_quad or max(4 * h.n_modes + 16, 64)
    th = 2 * np.pi * np.arange(M) / M
    pts = R * np.column_stack([np.cos(th), np.sin(th)])
    g = h.gradient(pts)
    nu = pts / R
    tau = np.column_stack([-nu[:, 1], nu[:, 0]])
    dn = np.sum(g * nu, axis=1)
    dt = np.sum(g * tau, axis=1)
    ds = 2 * np.pi * R / M
    lhs = (DIM - 2) * h.energy()
    return PohozaevReport(lhs, float(np.sum(dt**2) * ds), float(np.sum(dn**2) * ds))


def write_estimate_csv(rows, path) -> None:
    lines = ["quantity,value,bound,ratio"]
    for row in rows:
        lines.append(f"{row.quantity},{row.value:.17g},{row.bound:.17g},{row.ratio:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
