"""Displacement interpolation on a grid and its Eulerian diagnostics.

Atoms move on straight lines ``T_t(x) = t T(x) + (1 - t) x``. Each slice
deposits the atom masses (density ``rho``) and momenta ``m (T(x) - x)``
(flux ``j``) onto the grid nodes by bilinear splatting, which conserves mass
exactly. Velocities are never stored: wherever it matters the quotient
``|j|^2 / rho`` is evaluated with the convention ``0/0 = 0``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .density import GridDensity, bilinear
from .errors import DomainError
from .transport import TransportSolution

DEFAULT_TIMES = 17


def default_times(n: int = DEFAULT_TIMES) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def _check_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) < 2:
        raise DomainError("need at least two times")
    if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
        raise DomainError("times must increase from 0 to 1")
    return t


def splat(grid: GridDensity, points, weights) -> np.ndarray:
    """Bilinear deposition of point weights onto the nodes of ``grid``.

    Returns node values such that ``h^2 * sum`` equals ``sum(weights)`` along
    every trailing axis. Points in the outer half-cell rim are folded onto
    the edge nodes; points outside the rectangle raise ``DomainError``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    xmin, xmax, ymin, ymax = grid.extent
    tol = 1e-12 * grid.h
    out = (
        (pts[:, 0] < xmin - tol) | (pts[:, 0] > xmax + tol)
        | (pts[:, 1] < ymin - tol) | (pts[:, 1] > ymax + tol)
    )
    if out.any():
        raise DomainError(f"{int(out.sum())} atoms outside the grid, first at {pts[out][0]}")
    nx, ny = grid.shape
    u = np.clip((pts[:, 0] - grid.origin[0]) / grid.h - 0.5, 0.0, nx - 1)
    v = np.clip((pts[:, 1] - grid.origin[1]) / grid.h - 0.5, 0.0, ny - 1)
    i0 = np.minimum(np.floor(u).astype(int), max(nx - 2, 0))
    j0 = np.minimum(np.floor(v).astype(int), max(ny - 2, 0))
    fu, fv = u - i0, v - j0
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    acc = np.zeros((nx * ny, w.shape[1]))
    for ii, jj, c in ((i0, j0, (1 - fu) * (1 - fv)), (i1, j0, fu * (1 - fv)),
                      (i0, j1, (1 - fu) * fv), (i1, j1, fu * fv)):
        np.add.at(acc, ii * ny + jj, c[:, None] * w)
    return acc.reshape(nx, ny, w.shape[1]) / grid.h**2


@dataclass(frozen=True, eq=False)
class Interpolant:
    """Slices ``rho(., t)`` and ``j(., t)`` of a displacement interpolation.

    ``flux_slices`` has shape ``(n_times, nx, ny, 2)``. ``sol`` is kept so
    that diagnostics can go back to the atoms.
    """

    times: np.ndarray
    rho_slices: tuple[GridDensity, ...]
    flux_slices: np.ndarray
    sol: TransportSolution

    @property
    def grid(self) -> GridDensity:
        return self.rho_slices[0]

    @property
    def rho(self) -> np.ndarray:
        """Density values stacked as ``(n_times, nx, ny)``."""
        return np.stack([s.values for s in self.rho_slices])

    def smoothed(self) -> "Interpolant":
        """Box-average every slice over the atom spacing (removes splat aliasing)."""
        k = _box_size(self.grid, self.sol.n)
        if k == 1:
            return self
        # running-sum filters leave -1e-17 roundoff next to empty cells
        rho = tuple(s.with_values(np.maximum(uniform_filter(s.values, size=k, mode="nearest"), 0.0))
                    for s in self.rho_slices)
        flux = uniform_filter(self.flux_slices, size=(1, k, k, 1), mode="nearest")
        flux.setflags(write=False)
        return Interpolant(self.times, rho, flux, self.sol)

    def positions(self, t: float) -> np.ndarray:
        return t * self.sol.map + (1 - t) * self.sol.sources

    def time_weights(self) -> np.ndarray:
        """Trapezoid weights on ``times``."""
        dt = np.diff(self.times)
        w = np.zeros(len(self.times))
        w[:-1] += dt / 2
        w[1:] += dt / 2
        return w

    def write_csv(self, path) -> None:
        """Rows ``t,i,j,rho,j1,j2`` in time-major, then row-major node order."""
        nx, ny = self.grid.shape
        I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        with open(path, "w") as fh:
            fh.write("t,i,j,rho,j1,j2\n")
            for k, t in enumerate(self.times):
                rho = self.rho_slices[k].values.ravel()
                jf = self.flux_slices[k].reshape(-1, 2)
                for a, b, r, j1, j2 in zip(I.ravel(), J.ravel(), rho, jf[:, 0], jf[:, 1]):
                    fh.write(f"{t:.17g},{a},{b},{r:.17g},{j1:.17g},{j2:.17g}\n")


def displacement_interpolate(sol: TransportSolution, rho0: GridDensity, times=None,
                             grid: GridDensity | None = None, threads: int = 1) -> Interpolant:
    """Deposit ``T_t # rho0`` and ``T_t # [(T - Id) rho0]`` for each time.

    ``grid`` defaults to the grid of ``rho0``. Atoms must stay inside it.
    """
    t = _check_times(default_times() if times is None else times)
    grid = rho0 if grid is None else grid
    if abs(sol.masses.sum() - rho0.mass) > 1e-9 * rho0.mass:
        raise DomainError("solution masses do not match rho0")
    d = sol.displacement
    w = np.column_stack([sol.masses, sol.masses[:, None] * d])

    def one(tk):
        pos = tk * sol.map + (1 - tk) * sol.sources
        try:
            acc = splat(grid, pos, w)
        except DomainError as exc:
            raise DomainError(f"at t={tk:.6g}: {exc}") from None
        return acc

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            accs = list(ex.map(one, t))
    else:
        accs = [one(tk) for tk in t]
    rho = tuple(grid.with_values(a[..., 0]) for a in accs)
    flux = np.stack([a[..., 1:] for a in accs])
    flux.setflags(write=False)
    return Interpolant(t, rho, flux, sol)


def reverse_solution(sol: TransportSolution) -> TransportSolution:
    """The inverse matching, moving ``targets`` back onto ``sources``."""
    inv = sol.inverse_perm
    return TransportSolution(sol.targets, sol.sources, sol.masses[inv], inv, sol.cost)


# ---------------------------------------------------------------------------
# Regions


def ball_weights(grid: GridDensity, center=(0.0, 0.0), radius: float = np.inf,
                 sub: int = 8) -> np.ndarray:
    """Fraction of each grid cell covered by the ball (``sub x sub`` subsampling)."""
    nx, ny = grid.shape
    if not np.isfinite(radius):
        return np.ones((nx, ny))
    x, y = grid.axes()
    s = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.h
    cx = x[:, None] + s[None, :] - center[0]  # (nx, sub)
    cy = y[:, None] + s[None, :] - center[1]
    inside = (cx[:, None, :, None] ** 2 + cy[None, :, None, :] ** 2) <= radius**2
    return inside.mean(axis=(2, 3))


def _quotient(j: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``|j|^2 / rho`` with ``0`` where ``rho`` vanishes."""
    j2 = np.sum(j * j, axis=-1)
    empty = rho <= 0
    if np.any(j2[empty] > 0):
        raise AssertionError("flux without density on some cell")
    out = np.zeros_like(rho)
    np.divide(j2, rho, out=out, where=~empty)
    return out


def bb_energy(interp: Interpolant, center=(0.0, 0.0), radius: float = np.inf) -> float:
    """``int_0^1 int_B |j|^2 / rho`` by trapezoid in time and cell sums in space."""
    wb = ball_weights(interp.grid, center, radius) * interp.grid.h**2
    q = _quotient(interp.flux_slices, interp.rho)
    return float(np.dot(interp.time_weights(), np.sum(q * wb, axis=(1, 2))))


def lagrangian_energy(sol: TransportSolution) -> float:
    return float(sol.cost)


# ---------------------------------------------------------------------------
# Jacobian equation


@dataclass(frozen=True)
class JacobianResidual:
    points: np.ndarray  # interior lattice atoms x
    residual: np.ndarray  # rho_t(T_t x) det grad T_t(x) - rho0(x)
    det: np.ndarray
    flagged: np.ndarray  # det <= 0
    l1: float


def _box_size(grid: GridDensity, n_atoms: int) -> int:
    """Atom spacing in grid cells, from the number of support nodes per atom."""
    support = max(1, np.count_nonzero(grid.values > 0))
    return max(1, int(round(np.sqrt(support / n_atoms))))


def smoothed_slice(rho: GridDensity, n_atoms: int) -> GridDensity:
    """Box average over the atom spacing, which removes the splat aliasing."""
    k = _box_size(rho, n_atoms)
    if k == 1:
        return rho
    return rho.with_values(np.maximum(uniform_filter(rho.values, size=k, mode="nearest"), 0.0))


def jacobian_residual(sol: TransportSolution, rho0: GridDensity, rho1: GridDensity,
                      t: float = 1.0) -> JacobianResidual:
    """Pointwise Jacobian-equation residual on interior lattice atoms.

    ``grad T_t`` comes from central differences in lattice index space and
    the chain rule. For ``t < 1`` the intermediate density is the smoothed
    splat of ``T_t # rho0``.
    """
    if sol.lattice_shape is None:
        raise DomainError("jacobian_residual needs a lattice-quantized solution")
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    p, q = sol.lattice_shape
    if p < 3 or q < 3:
        raise DomainError("lattice too small for central differences")
    X = sol.sources.reshape(p, q, 2)
    Y = (t * sol.map + (1 - t) * sol.sources).reshape(p, q, 2)

    def d(A):
        da = 0.5 * (A[2:, 1:-1] - A[:-2, 1:-1])
        db = 0.5 * (A[1:-1, 2:] - A[1:-1, :-2])
        return da[..., 0] * db[..., 1] - da[..., 1] * db[..., 0]

    jx = d(X)
    jy = d(Y)
    det = jy / jx
    x = X[1:-1, 1:-1].reshape(-1, 2)
    y = Y[1:-1, 1:-1].reshape(-1, 2)
    if t == 1.0:
        rt = rho1(y)
    else:
        interp = displacement_interpolate(sol, rho0, [0.0, t, 1.0])
        rt = smoothed_slice(interp.rho_slices[1], sol.n)(y)
    res = rt * det.ravel() - rho0(x)
    cell = np.abs(jx).ravel()
    return JacobianResidual(x, res, det.ravel(), det.ravel() <= 0,
                            float(np.sum(np.abs(res) * cell)))


# ---------------------------------------------------------------------------
# Displacement convexity


@dataclass(frozen=True)
class ConvexityReport:
    max_density: float
    bound: float
    worst_time: float
    passed: bool


def displacement_convexity_check(interp: Interpolant, gamma: float, center=(0.0, 0.0),
                                 radius: float = 0.5, tol: float = 0.05) -> ConvexityReport:
    """``sup`` of the smoothed slices over the ball and all times vs ``1 + gamma + tol``."""
    inside = ball_weights(interp.grid, center, radius, sub=1) > 0
    best, when = -np.inf, 0.0
    for t, s in zip(interp.times, interp.rho_slices):
        v = smoothed_slice(s, interp.sol.n).values[inside]
        if v.size and v.max() > best:
            best, when = float(v.max()), float(t)
    bound = 1.0 + gamma + tol
    return ConvexityReport(best, bound, when, best <= bound)


# ---------------------------------------------------------------------------
# Weak continuity equation


def _derivatives(zeta, pts, t, step=1e-5):
    z = zeta(pts, t)
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    gx = (zeta(pts + ex, t) - zeta(pts - ex, t)) / (2 * step)
    gy = (zeta(pts + ey, t) - zeta(pts - ey, t)) / (2 * step)
    zt = (zeta(pts, t + step) - zeta(pts, t - step)) / (2 * step)
    return z, np.stack([gx, gy], axis=-1), zt


def continuity_residual(interp: Interpolant, zeta, center=(0.0, 0.0), radius: float = 0.5,
                        n_boundary: int = 256) -> float:
    """Defect of the weak continuity equation on ``B x [0, 1]``.

    ``zeta(points, t)`` is a smooth test function. Returns
    ``|int_B zeta rho |_0^1 - int int_B (rho d_t zeta + j . grad zeta)
    + int int_{dB} zeta j . nu|``, evaluated on the smoothed slices.
    """
    interp = interp.smoothed()
    g = interp.grid
    wb = ball_weights(g, center, radius) * g.h**2
    nodes = g.nodes()
    bulk = np.zeros(len(interp.times))
    for k, t in enumerate(interp.times):
        z, gz, zt = _derivatives(zeta, nodes, t)
        rho = interp.rho_slices[k].values.ravel()
        j = interp.flux_slices[k].reshape(-1, 2)
        bulk[k] = np.sum(wb.ravel() * (rho * zt + np.sum(j * gz, axis=1)))
    ends = [float(np.sum(wb.ravel() * zeta(nodes, t) * interp.rho_slices[k].values.ravel()))
            for k, t in ((0, 0.0), (-1, 1.0))]

    th = 2 * np.pi * (np.arange(n_boundary) + 0.5) / n_boundary
    nu = np.column_stack([np.cos(th), np.sin(th)])
    bp = np.asarray(center, dtype=float) + radius * nu
    ds = 2 * np.pi * radius / n_boundary
    bnd = np.zeros(len(interp.times))
    for k, t in enumerate(interp.times):
        jf = interp.flux_slices[k]
        jn = (bilinear(g.origin, g.h, jf[..., 0], bp) * nu[:, 0]
              + bilinear(g.origin, g.h, jf[..., 1], bp) * nu[:, 1])
        bnd[k] = np.sum(zeta(bp, t) * jn) * ds
    w = interp.time_weights()
    return float(abs(ends[1] - ends[0] - np.dot(w, bulk) + np.dot(w, bnd)))

