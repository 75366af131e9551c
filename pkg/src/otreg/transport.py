"""Exact discrete quadratic optimal transport between equal-mass atom clouds.

Densities are quantised into ``n`` atoms of equal mass by column
stratification: the rectangle is cut into ``p`` vertical strips of equal mass
and each strip into ``q`` pieces of equal mass (``p * q = n``); an atom sits
at the mass centroid of its piece. The atoms of a uniform density form a
regular lattice, and smooth densities give a smoothly deformed lattice. The
optimal matching of the two clouds is found with an exact linear assignment
solver (shortest augmenting path).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .density import DIM, DensityPair, GridDensity
from .errors import CapacityError, DomainError

MAX_POINTS = 4096
MONOTONE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Quantisation


def _lattice_shape(n: int, aspect: float) -> tuple[int, int]:
    """Factor ``n = p * q`` with ``p / q`` closest to ``aspect``."""
    best = (1, n)
    for p in range(1, n + 1):
        if n % p:
            continue
        q = n // p
        if abs(np.log(p / q / aspect)) < abs(np.log(best[0] / best[1] / aspect)):
            best = (p, q)
    return best


def _overlaps(edges: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Overlap lengths and first moments of ``[lo, hi]`` with each cell.

    Returns arrays of shape ``(len(lo), len(edges) - 1)``.
    """
    a = np.maximum(lo[:, None], edges[None, :-1])
    b = np.minimum(hi[:, None], edges[None, 1:])
    w = np.clip(b - a, 0.0, None)
    return w, w * 0.5 * (a + b)


def _cut_points(cum: np.ndarray, edges: np.ndarray, k: int) -> np.ndarray:
    """Coordinates where the piecewise-linear cumulative mass hits ``j/k`` of the total."""
    targets = cum[-1] * np.arange(k + 1) / k
    ucum, first = np.unique(cum, return_index=True)
    return np.interp(targets, ucum, edges[first])


def quantize(rho: GridDensity, n_points: int) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Equal-mass atoms of ``rho`` by column stratification.

    Returns ``(points, masses, (p, q))``; atom ``c * q + r`` is piece ``r`` of
    strip ``c``.
    """
    if n_points < 1:
        raise DomainError("n_points must be positive")
    xmin, xmax, ymin, ymax = rho.extent
    p, q = _lattice_shape(n_points, (xmax - xmin) / (ymax - ymin))
    h = rho.h
    V = rho.values
    ex = rho.origin[0] + h * np.arange(rho.nx + 1)
    ey = rho.origin[1] + h * np.arange(rho.ny + 1)
    colmass = h * h * V.sum(axis=1)
    cx = np.concatenate([[0.0], np.cumsum(colmass)])
    xcuts = _cut_points(cx, ex, p)
    wx, mx = _overlaps(ex, xcuts[:-1], xcuts[1:])  # (p, nx)

    pts = np.empty((p * q, 2))
    for c in range(p):
        ymass = h * (wx[c] @ V)  # mass of strip c per y-cell
        cy = np.concatenate([[0.0], np.cumsum(ymass)])
        ycuts = _cut_points(cy, ey, q)
        wy, my = _overlaps(ey, ycuts[:-1], ycuts[1:])  # (q, ny)
        m = (wx[c] @ V) @ wy.T
        xm = (mx[c] @ V) @ wy.T
        ym = (wx[c] @ V) @ my.T
        pts[c * q:(c + 1) * q, 0] = xm / m
        pts[c * q:(c + 1) * q, 1] = ym / m
    masses = np.full(p * q, rho.mass / (p * q))
    return pts, masses, (p, q)


# ---------------------------------------------------------------------------
# Solutions


def matching_cost(sources, targets, perm, masses) -> float:
    """``sum_i m_i |targets[perm[i]] - sources[i]|^2``."""
    d = np.asarray(targets)[np.asarray(perm)] - np.asarray(sources)
    return float(np.dot(masses, np.einsum("ij,ij->i", d, d)))


@dataclass(frozen=True, eq=False)
class TransportSolution:
    """Optimal matching of equal-mass source and target atoms.

    ``perm[i]`` is the target atom receiving source atom ``i``.
    """

    sources: np.ndarray
    targets: np.ndarray
    masses: np.ndarray
    perm: np.ndarray
    cost: float
    lattice_shape: tuple[int, int] | None = None

    @classmethod
    def from_map(cls, sources, images, masses, lattice_shape=None) -> "TransportSolution":
        """Wrap a prescribed map ``sources[i] -> images[i]`` (identity matching)."""
        src = np.asarray(sources, dtype=float)
        img = np.asarray(images, dtype=float)
        m = np.broadcast_to(np.asarray(masses, dtype=float), (len(src),)).copy()
        perm = np.arange(len(src))
        return cls(src, img, m, perm, matching_cost(src, img, perm, m), lattice_shape)

    @property
    def n(self) -> int:
        return len(self.sources)

    @cached_property
    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv

    @property
    def map(self) -> np.ndarray:
        """``T(x_i)`` per source atom (barycentric projection of a matching)."""
        return self.targets[self.perm]

    @property
    def inverse_map(self) -> np.ndarray:
        """``T^{-1}(y_j)`` per target atom."""
        return self.sources[self.inverse_perm]

    @property
    def displacement(self) -> np.ndarray:
        return self.map - self.sources

    def plan(self) -> sparse.coo_matrix:
        n = self.n
        return sparse.coo_matrix((self.masses, (np.arange(n), self.perm)), shape=(n, n))

    @cached_property
    def _source_tree(self) -> cKDTree:
        return cKDTree(self.sources)

    @cached_property
    def _target_tree(self) -> cKDTree:
        return cKDTree(self.targets)

    @cached_property
    def _forward_interp(self):
        return CloughTocher2DInterpolator(self.sources, self.displacement)

    @cached_property
    def _inverse_interp(self):
        return CloughTocher2DInterpolator(self.targets, self.inverse_map - self.targets)

    def _extend(self, interp, tree, disp, points, return_flags):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = interp(pts)
        off = np.isnan(d[:, 0])
        if off.any():
            _, idx = tree.query(pts[off])
            d[off] = disp[idx]
        out = pts + d
        return (out, off) if return_flags else out

    def map_at(self, points, return_flags: bool = False):
        """Evaluate ``T`` anywhere.

        Inside the convex hull of the source atoms the displacement is
        interpolated (C1 Clough-Tocher); outside, the displacement of the
        nearest atom is used and the point is flagged as off-support.
        """
        return self._extend(self._forward_interp, self._source_tree, self.displacement,
                            points, return_flags)

    def inverse_at(self, points, return_flags: bool = False):
        """Evaluate ``T^{-1}`` anywhere, same conventions as :meth:`map_at`."""
        return self._extend(self._inverse_interp, self._target_tree,
                            self.inverse_map - self.targets, points, return_flags)

    def nearest_source(self, points) -> np.ndarray:
        return self._source_tree.query(np.atleast_2d(points))[1]

    def nearest_target(self, points) -> np.ndarray:
        return self._target_tree.query(np.atleast_2d(points))[1]

    def write_csv(self, path) -> None:
        """Map dump: ``x1,x2,T1,T2,mass`` per source atom."""
        T = self.map
        rows = ["x1,x2,T1,T2,mass"]
        for (x1, x2), (t1, t2), m in zip(self.sources, T, self.masses):
            rows.append(f"{x1:.17g},{x2:.17g},{t1:.17g},{t2:.17g},{m:.17g}")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def solve_points(sources, targets, masses=None, lattice_shape=None) -> TransportSolution:
    """Optimal matching between two clouds of equally weighted atoms."""
    src = np.asarray(sources, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != DIM:
        raise DomainError("sources and targets must be (n, 2) arrays of equal length")
    n = len(src)
    if n > MAX_POINTS:
        raise CapacityError(f"{n} atoms exceed the exact-solver limit of {MAX_POINTS}")
    m = np.broadcast_to(np.asarray(1.0 if masses is None else masses, dtype=float), (n,)).copy()
    C = np.sum((src[:, None, :] - tgt[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(n, dtype=int)
    perm[rows] = cols
    return TransportSolution(src, tgt, m, perm, matching_cost(src, tgt, perm, m), lattice_shape)


def solve_ot(pair: DensityPair, n_points: int) -> TransportSolution:
    """Quantise both densities into ``n_points`` atoms and match them optimally."""
    if n_points > MAX_POINTS:
        raise CapacityError(f"n_points={n_points} exceeds the exact-solver limit of {MAX_POINTS}")
    gap = abs(pair.rho0.mass - pair.rho1.mass)
    if gap > pair.mass_tol * max(pair.rho0.mass, pair.rho1.mass):
        raise DomainError(f"cannot quantise: masses differ by {gap:.3e}")
    src, m, shape = quantize(pair.rho0, n_points)
    tgt, _, _ = quantize(pair.rho1, n_points)
    return solve_points(src, tgt, m, lattice_shape=shape)


def brute_force_matching(sources, targets, masses=None) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all permutations (oracle, n <= 8)."""
    src = np.asarray(sources, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    n = len(src)
    if n > 8:
        raise CapacityError("brute force is limited to 8 atoms")
    m = np.broadcast_to(np.asarray(1.0 if masses is None else masses, dtype=float), (n,)).copy()
    best_perm, best = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = matching_cost(src, tgt, perm, m)
        if c < best:
            best_perm, best = np.array(perm), c
    return best_perm, best


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class MonotonicityReport:
    min_inner_product: float
    violating_pairs: int
    n_pairs: int


def check_monotonicity(sol: TransportSolution, tol: float = MONOTONE_TOL,
                       max_atoms: int = MAX_POINTS) -> MonotonicityReport:
    """Minimum of ``(T(x) - T(y)) . (x - y)`` over distinct atom pairs."""
    x, T = sol.sources, sol.map
    if len(x) > max_atoms:
        stride = int(np.ceil(len(x) / max_atoms))
        x, T = x[::stride], T[::stride]
    n = len(x)
    if n < 2:
        return MonotonicityReport(np.inf, 0, 0)
    best, bad = np.inf, 0
    chunk = max(1, 4_000_000 // n)
    for s in range(0, n, chunk):
        dx = x[s:s + chunk, None, :] - x[None, :, :]
        dT = T[s:s + chunk, None, :] - T[None, :, :]
        ip = np.einsum("ijk,ijk->ij", dT, dx)
        rows = np.arange(s, min(s + chunk, n))
        ip[rows - s, rows] = np.inf
        best = min(best, float(ip.min()))
        bad += int(np.count_nonzero(ip < -tol))
    return MonotonicityReport(best, bad // 2, n * (n - 1) // 2)


def inverse_consistency(sol: TransportSolution) -> int:
    """Atoms for which ``T^{-1}(T(x))`` (nearest-support lookup) is not ``x``."""
    j = sol.nearest_target(sol.map)
    i = sol.nearest_source(sol.inverse_map[j])
    return int(np.count_nonzero(i != np.arange(sol.n)))


@dataclass(frozen=True)
class LinftyReport:
    sup_displacement: float
    sup_forward: float
    sup_inverse: float
    energy: float
    ratio: float
    excess: float
    small_excess: bool
    inclusion_inner: bool
    inclusion_preimage: bool


def linfty_bound_check(sol: TransportSolution, R: float, center=(0.0, 0.0), times=None,
                       small_excess: float = 0.05) -> LinftyReport:
    """Sup of the displacement on ``B_{3R/4}`` against the local energy.

    ``ratio = sup / energy**(1/(d+2))``. Also checks on a time grid that
    ``T_t(B_{R/8}) ⊂ B_{3R/16}`` and ``T_t^{-1}(B_{R/2}) ⊂ B_{3R/4}``.
    ``small_excess`` records whether the smallness hypothesis
    ``R^{-2} avg_{B_R} |T-x|^2 rho0 <= small_excess`` holds.
    """
    c = np.asarray(center, dtype=float)
    x, T = sol.sources, sol.map
    y, Tinv = sol.targets, sol.inverse_map
    rx = np.linalg.norm(x - c, axis=1)
    ry = np.linalg.norm(y - c, axis=1)
    fwd = np.linalg.norm(T - x, axis=1)[rx <= 0.75 * R]
    inv = np.linalg.norm(Tinv - y, axis=1)[ry <= 0.75 * R]
    sup_f = float(fwd.max()) if fwd.size else 0.0
    sup_i = float(inv.max()) if inv.size else 0.0
    inball = rx <= R
    energy = float(np.dot(sol.masses[inball], np.sum((T - x)[inball] ** 2, axis=1)))
    sup = sup_f + sup_i
    ratio = sup / energy ** (1.0 / (DIM + 2)) if energy > 0 else (0.0 if sup == 0 else np.inf)
    excess = energy / (np.pi * R**2) / R**2
    ts = np.linspace(0.0, 1.0, 17) if times is None else np.asarray(times, dtype=float)
    inner_ok, pre_ok = True, True
    small = rx < R / 8
    for t in ts:
        Tt = t * T + (1 - t) * x
        rt = np.linalg.norm(Tt - c, axis=1)
        if np.any(rt[small] >= 3 * R / 16):
            inner_ok = False
        if np.any(rx[rt < R / 2] >= 0.75 * R):
            pre_ok = False
    return LinftyReport(sup, sup_f, sup_i, energy, ratio, excess, excess <= small_excess,
                        inner_ok, pre_ok)
