"""Sampled Hölder densities on uniform 2-D grids.

Nodes are cell centres: node ``(i, j)`` sits at
``origin + ((i + 1/2) h, (j + 1/2) h)`` and represents the cell of area
``h**2`` around it, so ``h**2 * values.sum()`` is a midpoint-rule mass.
Off-node values come from bilinear interpolation between node samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DomainError

DIM = 2

#: Pair scans above this many in-ball nodes are subsampled with a fixed stride.
MAX_SCAN_NODES = 4096


def bilinear(origin, h: float, values: np.ndarray, points) -> np.ndarray:
    """Bilinear interpolation of cell-centred node ``values`` (any sign).

    Zero outside the covered rectangle; the outer half-cell rim is clamped
    to the edge nodes.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    V = np.asarray(values)
    nx, ny = V.shape
    out = np.zeros(len(pts))
    x0, y0 = origin
    inside = (
        (pts[:, 0] >= x0) & (pts[:, 0] <= x0 + nx * h)
        & (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + ny * h)
    )
    if not inside.any():
        return out
    p = pts[inside]
    u = np.clip((p[:, 0] - x0) / h - 0.5, 0.0, nx - 1)
    v = np.clip((p[:, 1] - y0) / h - 0.5, 0.0, ny - 1)
    i0 = np.minimum(np.floor(u).astype(int), max(nx - 2, 0))
    j0 = np.minimum(np.floor(v).astype(int), max(ny - 2, 0))
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    fu = u - i0
    fv = v - j0
    out[inside] = (
        (1 - fu) * (1 - fv) * V[i0, j0]
        + fu * (1 - fv) * V[i1, j0]
        + (1 - fu) * fv * V[i0, j1]
        + fu * fv * V[i1, j1]
    )
    return out



@dataclass(frozen=True)
class GridDensity:
    origin: tuple[float, float]
    h: float
    values: np.ndarray
    alpha: float

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or min(vals.shape) < 1:
            raise DomainError("values must be a non-empty nx-by-ny array")
        if not np.all(np.isfinite(vals)):
            raise DomainError("density values must be finite")
        if np.any(vals < 0):
            raise DomainError("density values must be non-negative")
        if not self.h > 0:
            raise DomainError(f"spacing h must be positive, got {self.h}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not vals.sum() > 0:
            raise DomainError("density has zero total mass")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "h", float(self.h))

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def mass(self) -> float:
        return float(self.h**2 * self.values.sum())

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the covered rectangle."""
        x0, y0 = self.origin
        return (x0, x0 + self.nx * self.h, y0, y0 + self.ny * self.h)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.h
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.h
        return x, y

    def nodes(self) -> np.ndarray:
        """Node coordinates as an ``(nx*ny, 2)`` array in row-major order."""
        x, y = self.axes()
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def evaluate(self, points) -> np.ndarray:
        """Bilinear interpolation; zero outside the covered rectangle.

        Points in the outer half-cell rim are clamped to the edge nodes.
        """
        return bilinear(self.origin, self.h, self.values, points)

    def __call__(self, points) -> np.ndarray:
        return self.evaluate(points)

    def with_values(self, values) -> "GridDensity":
        return replace(self, values=np.asarray(values, dtype=float))


@dataclass(frozen=True)
class DensityPair:
    rho0: GridDensity
    rho1: GridDensity
    mass_tol: float = 1e-9

    def __post_init__(self):
        gap = abs(self.rho0.mass - self.rho1.mass)
        if gap > self.mass_tol * max(self.rho0.mass, self.rho1.mass):
            raise DomainError(
                f"masses differ by {gap:.3e} (tolerance {self.mass_tol:.1e} relative)"
            )
        if self.rho0.alpha != self.rho1.alpha:
            raise DomainError("rho0 and rho1 must share the Hölder exponent alpha")

    @property
    def alpha(self) -> float:
        return self.rho0.alpha


@dataclass(frozen=True)
class ScalingRecord:
    """What :func:`normalize_at` did, enough to undo it."""

    rho0_scale: float
    rho1_scale: float
    dilation: float
    x0: tuple[float, float]
    y0: tuple[float, float]

    @property
    def is_identity(self) -> bool:
        return self.rho0_scale == 1.0 and self.rho1_scale == 1.0 and self.dilation == 1.0


# ---------------------------------------------------------------------------
# Hölder seminorm


def holder_seminorm_samples(points, values, alpha: float, max_nodes: int = MAX_SCAN_NODES) -> float:
    """Largest ``|v_a - v_b| / |p_a - p_b|**alpha`` over distinct sample pairs.

    Above ``max_nodes`` samples a deterministic stride keeps roughly
    ``max_nodes`` of them.
    """
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(pts) < 2:
        raise DomainError(f"need at least 2 samples for a seminorm, got {len(pts)}")
    if len(pts) > max_nodes:
        stride = int(np.ceil(len(pts) / max_nodes))
        pts, vals = pts[::stride], vals[::stride]
    best = 0.0
    chunk = max(1, 2_000_000 // len(pts))
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        dist = np.linalg.norm(p[:, None, :] - pts[None, :, :], axis=-1)
        diff = np.abs(vals[start:start + chunk, None] - vals[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dist > 0, diff / dist**alpha, 0.0)
        best = max(best, float(q.max()))
    return best


def holder_seminorm(rho: GridDensity, R: float, center=(0.0, 0.0), support_only: bool = True) -> float:
    """Pair-scan lower bound of ``[rho]_{alpha, B_R(center)}``.

    Only nodes inside the closed ball count; with ``support_only`` nodes where
    the density vanishes are left out, so the seminorm is taken on the support.
    """
    nodes = rho.nodes()
    vals = rho.values.ravel()
    mask = np.linalg.norm(nodes - np.asarray(center, dtype=float), axis=1) <= R
    if support_only:
        mask &= vals > 0
    if mask.sum() < 2:
        raise DomainError(
            f"ball of radius {R} around {tuple(center)} holds {int(mask.sum())} grid node(s); need 2"
        )
    return holder_seminorm_samples(nodes[mask], vals[mask], rho.alpha)


# ---------------------------------------------------------------------------
# Normalisation


def _value_at(rho: GridDensity, p) -> float:
    return float(rho.evaluate(np.asarray(p, dtype=float)[None, :])[0])


def normalize_at(pair: DensityPair, x0, y0) -> tuple[DensityPair, ScalingRecord]:
    """Rescale so that the source is 1 at ``x0`` and the target is 1 at ``y0``.

    The target frame is dilated about ``y0`` by ``(rho0(x0)/rho1(y0))**(1/d)``
    so that both normalised densities carry the same mass.
    """
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    c0 = _value_at(pair.rho0, x0)
    c1 = _value_at(pair.rho1, y0)
    if c0 <= 0 or c1 <= 0:
        raise DomainError(f"densities must be positive at the base points (got {c0}, {c1})")
    s = (c0 / c1) ** (1.0 / DIM)
    rec = ScalingRecord(c0, c1, s, tuple(x0), tuple(y0))
    if rec.is_identity:
        return pair, rec
    r0 = pair.rho0.with_values(pair.rho0.values / c0)
    origin1 = y0 + (np.asarray(pair.rho1.origin) - y0) / s
    r1 = replace(pair.rho1, origin=tuple(origin1), h=pair.rho1.h / s,
                 values=pair.rho1.values / c1)
    return DensityPair(r0, r1, pair.mass_tol), rec


def denormalize(pair: DensityPair, rec: ScalingRecord) -> DensityPair:
    """Inverse of :func:`normalize_at` for the recorded scaling."""
    if rec.is_identity:
        return pair
    y0 = np.asarray(rec.y0)
    r0 = pair.rho0.with_values(pair.rho0.values * rec.rho0_scale)
    origin1 = y0 + (np.asarray(pair.rho1.origin) - y0) * rec.dilation
    r1 = replace(pair.rho1, origin=tuple(origin1), h=pair.rho1.h * rec.dilation,
                 values=pair.rho1.values * rec.rho1_scale)
    return DensityPair(r0, r1, pair.mass_tol)


# ---------------------------------------------------------------------------
# Test densities


def grid_geometry(n: int, half_width: float = 1.0, shift=(0.0, 0.0)) -> tuple[tuple[float, float], float]:
    """Origin and spacing of an ``n``-by-``n`` grid on ``[-L, L]^2 + shift``.

    Odd ``n`` puts a node exactly on ``shift``.
    """
    h = 2.0 * half_width / n
    return (shift[0] - half_width, shift[1] - half_width), h


def generate_test_density(kind: str, *, n: int = 64, half_width: float = 1.0, shift=(0.0, 0.0),
                          alpha: float = 0.5, support: str = "box", support_radius: float | None = None,
                          **params) -> GridDensity:
    """Deterministic test densities on ``[-L, L]^2 + shift``.

    kinds
        ``uniform``             constant ``value`` (default 1)
        ``holder_bump``         ``1 + c |x - x0|**alpha``
        ``smooth_perturbation`` ``1 + eps sin(kx (x-sx) + px) sin(ky (y-sy) + py)``
        ``two_bump``            ``base + amp (g(x - c1) + g(x - c2))`` with Gaussian ``g``

    Coordinates in the formulas are relative to ``shift``, so a shifted
    density is the exact translate of the unshifted one. With
    ``support="disk"`` values vanish outside ``support_radius``.
    """
    origin, h = grid_geometry(n, half_width, shift)
    g = GridDensity(origin, h, np.ones((n, n)), alpha)
    rel = g.nodes() - np.asarray(shift, dtype=float)
    x, y = rel[:, 0], rel[:, 1]
    if kind == "uniform":
        value = float(params.get("value", 1.0))
        if value <= 0:
            raise DomainError("uniform density needs a positive value")
        vals = np.full(len(rel), value)
    elif kind == "holder_bump":
        c = float(params.get("c", 0.1))
        bc = np.asarray(params.get("bump_center", (0.0, 0.0)), dtype=float)
        vals = 1.0 + c * np.linalg.norm(rel - bc, axis=1) ** alpha
        if c < 0 and 1.0 + c * (np.sqrt(2) * half_width + np.linalg.norm(bc)) ** alpha <= 0:
            raise DomainError(f"holder_bump amplitude c={c} drives the density to zero")
    elif kind == "smooth_perturbation":
        eps = float(params.get("eps", 0.05))
        if abs(eps) >= 1:
            raise DomainError(f"smooth_perturbation amplitude eps={eps} drives the density to zero")
        kx = float(params.get("kx", np.pi))
        ky = float(params.get("ky", np.pi))
        px = float(params.get("px", 0.0))
        py = float(params.get("py", 0.0))
        vals = 1.0 + eps * np.sin(kx * x + px) * np.sin(ky * y + py)
    elif kind == "two_bump":
        base = float(params.get("base", 0.2))
        amp = float(params.get("amp", 1.0))
        width = float(params.get("width", 0.3))
        c1 = np.asarray(params.get("c1", (-0.5, 0.0)), dtype=float)
        c2 = np.asarray(params.get("c2", (0.5, 0.0)), dtype=float)
        if base <= 0 or amp < 0:
            raise DomainError("two_bump needs base > 0 and amp >= 0")
        gauss = lambda c: np.exp(-np.sum((rel - c) ** 2, axis=1) / (2 * width**2))  # noqa: E731
        vals = base + amp * (gauss(c1) + gauss(c2))
    else:
        raise DomainError(f"unknown density kind {kind!r}")
    if support == "disk":
        radius = half_width if support_radius is None else support_radius
        vals = np.where(np.linalg.norm(rel, axis=1) <= radius, vals, 0.0)
    elif support != "box":
        raise DomainError(f"unknown support {support!r}")
    if np.any(vals[vals != 0] <= 0) or not np.any(vals > 0):
        raise DomainError(f"{kind} parameters produce a non-positive density")
    return GridDensity(origin, h, vals.reshape(n, n), alpha)


def scale_to_mass(rho: GridDensity, mass: float) -> GridDensity:
    return rho.with_values(rho.values * (mass / rho.mass))


# ---------------------------------------------------------------------------
# Text file format


def write_density(rho: GridDensity, path) -> None:
    """Header ``nx ny h x0 y0 alpha`` then ``nx*ny`` values, row-major."""
    lines = [
        f"{rho.nx} {rho.ny} {rho.h!r} {rho.origin[0]!r} {rho.origin[1]!r} {rho.alpha!r}",
    ]
    for row in rho.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_density(path) -> GridDensity:
    text = Path(path).read_text().split("\n", 1)
    header = text[0].split()
    if len(header) != 6:
        raise DomainError(f"{path}: header must be 'nx ny h x0 y0 alpha'")
    try:
        nx, ny = int(header[0]), int(header[1])
        h, x0, y0, alpha = map(float, header[2:])
        vals = np.array((text[1] if len(text) > 1 else "").split(), dtype=float)
    except ValueError as exc:
        raise DomainError(f"{path}: {exc}") from None
    if vals.size != nx * ny:
        raise DomainError(f"{path}: expected {nx * ny} values, found {vals.size}")
    if np.any(np.isnan(vals)):
        raise DomainError(f"{path}: NaN values are not allowed")
    if np.any(vals < 0):
        raise DomainError(f"{path}: negative values are not allowed")
    return GridDensity((x0, y0), h, vals.reshape(nx, ny), alpha)
