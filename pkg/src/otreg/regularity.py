"""Excess decay, tilting and the epsilon-regularity classification.

The iteration works on a :class:`MapInstance`, i.e. the map, its inverse
and both densities as callables. Affine changes of variables compose as
closures, so every scale is evaluated against the original solution without
re-solving. At each scale the excess is a cell-centred lattice quadrature
over ``B_R`` and the harmonic approximation is built from a local lattice
of ``T`` pushed through the displacement interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .density import DensityPair, GridDensity, holder_seminorm_samples
from .elliptic import HarmonicField, solve_neumann_laplace
from .errors import ConfigError, DegenerateInputError, DomainError
from .eulerian import Interpolant, displacement_interpolate
from .transport import TransportSolution
from .boundary_layer import boundary_flux, _trapezoid_weights

Array = np.ndarray

# Excess values below this are rounding noise of the scaled displacement.
EXCESS_FLOOR = (100 * np.finfo(float).eps) ** 2


@dataclass(frozen=True)
class RegularityConfig:
    alpha: float = 0.5
    epsilon_threshold: float = 0.02
    theta: float = 0.25
    alpha_prime: float | None = None
    C_theta: float = 100.0
    C2: float = 10.0
    frame_constant: float = 50.0
    layer_multiplier: float = 8.0
    K: int = 3
    n_shells: int = 8
    n_theta: int = 128
    n_modes: int = 32
    local_cells: int = 80
    local_halfwidth: float = 1.25
    local_atoms_halfwidth: float = 1.1
    quad_points: int = 64
    holder_points: int = 25
    fit_neighbors: int = 25
    scan_radius_factor: float = 1.5

    def __post_init__(self):
        if self.alpha_prime is None:
            object.__setattr__(self, "alpha_prime", (1 + self.alpha) / 2)
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.theta < 0.5:
            raise ConfigError(f"theta must lie in (0, 1/2), got {self.theta}")
        if not self.alpha < self.alpha_prime < 1:
            raise ConfigError(f"alpha_prime must lie in (alpha, 1), got {self.alpha_prime}")
        if not self.epsilon_threshold > 0:
            raise ConfigError("epsilon_threshold must be positive")
        if not 1 <= self.K <= 6:
            raise ConfigError(f"K must lie in 1..6, got {self.K}")
        for name in ("C_theta", "C2", "frame_constant", "layer_multiplier"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")


def sym2_exp(A) -> Array:
    """``exp(-A/2)`` for a symmetric 2x2 ``A`` in closed form.

    With ``M = -A/2 = m I + N`` (``N`` trace-free, ``N^2 = s^2 I``),
    ``exp(M) = e^m (cosh(s) I + sinh(s)/s N)``.
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2) or abs(A[0, 1] - A[1, 0]) > 1e-12 * max(1.0, np.abs(A).max()):
        raise DomainError("sym2_exp needs a symmetric 2x2 matrix")
    M = -0.5 * A
    m = 0.5 * (M[0, 0] + M[1, 1])
    N = M - m * np.eye(2)
    s = np.sqrt(N[0, 0] ** 2 + N[0, 1] ** 2)
    sh = np.sinh(s) / s if s > 1e-300 else 1.0
    out = np.exp(m) * (np.cosh(s) * np.eye(2) + sh * N)
    out[1, 0] = out[0, 1]
    return out


def _apply(M, pts):
    return np.atleast_2d(pts) @ np.asarray(M).T


# ---------------------------------------------------------------------------
# Instances


@dataclass(frozen=True, eq=False)
class MapInstance:
    """``T``, ``T^{-1}``, ``rho0``, ``rho1`` as callables on ``(n, 2)`` arrays."""

    T: Callable[[Array], Array]
    Tinv: Callable[[Array], Array]
    rho0: Callable[[Array], Array]
    rho1: Callable[[Array], Array]
    alpha: float

    @classmethod
    def from_solution(cls, sol: TransportSolution, pair: DensityPair) -> "MapInstance":
        return cls(sol.map_at, sol.inverse_at, pair.rho0, pair.rho1, pair.alpha)

    def rescaled(self, center, R: float) -> "MapInstance":
        """``x~ = (x - c) / R`` applied to both sides."""
        c = np.asarray(center, dtype=float)
        T, Ti, r0, r1 = self.T, self.Tinv, self.rho0, self.rho1
        return MapInstance(
            lambda x: (T(c + R * np.atleast_2d(x)) - c) / R,
            lambda y: (Ti(c + R * np.atleast_2d(y)) - c) / R,
            lambda x: r0(c + R * np.atleast_2d(x)),
            lambda y: r1(c + R * np.atleast_2d(y)),
            self.alpha,
        )

    def tilted(self, B, b, lam: float) -> "MapInstance":
        """``x = B x^``, ``y^ = lam B (y - b)``, ``rho1^ = lam^-2 rho1``."""
        B = np.asarray(B, dtype=float)
        b = np.asarray(b, dtype=float)
        Bi = np.linalg.inv(B)
        T, Ti, r0, r1 = self.T, self.Tinv, self.rho0, self.rho1
        return MapInstance(
            lambda x: lam * _apply(B, T(_apply(B, x)) - b),
            lambda y: _apply(Bi, Ti(_apply(Bi, y) / lam + b)),
            lambda x: r0(_apply(B, x)),
            lambda y: r1(_apply(Bi, y) / lam + b) / lam**2,
            self.alpha,
        )


def ball_lattice(R: float, n: int, center=(0.0, 0.0)) -> tuple[Array, float]:
    """Cell centres of an ``n x n`` lattice on ``[-R, R]^2`` inside ``B_R``, and the cell area."""
    s = (np.arange(n) + 0.5) / n * 2 * R - R
    X, Y = np.meshgrid(s, s, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) < R]
    return pts + np.asarray(center, dtype=float), (2 * R / n) ** 2


def holder_on_ball(f, R: float, alpha: float, n: int = 25, center=(0.0, 0.0)) -> float:
    pts, _ = ball_lattice(R, n, center)
    vals = np.asarray(f(pts), dtype=float)
    keep = vals > 0
    if keep.sum() < 2:
        return 0.0
    return holder_seminorm_samples(pts[keep], vals[keep], alpha)


# ---------------------------------------------------------------------------
# Excess


@dataclass(frozen=True)
class ExcessReport:
    R: float
    excess: float
    gamma: float
    holder_terms: float

    @property
    def criterion_value(self) -> float:
        return self.excess + self.holder_terms


def excess(sol: TransportSolution, pair: DensityPair, R: float, center=(0.0, 0.0),
           holder_points: int = 25) -> ExcessReport:
    """Atom quadrature of ``R^-2 avg_{B_R} |T - x|^2 rho0`` plus Hoelder terms.

    The average divides by the volume the atoms in the ball represent,
    ``sum m / rho0(x)``.
    """
    c = np.asarray(center, dtype=float)
    inside = np.hypot(*(sol.sources - c).T) < R
    if not inside.any():
        raise DomainError(f"no atoms in B_{R:g}({c[0]:g}, {c[1]:g})")
    x = sol.sources[inside]
    m = sol.masses[inside]
    r0 = pair.rho0(x)
    vol = np.sum(m[r0 > 0] / r0[r0 > 0])
    d = sol.map[inside] - x
    e = float(np.dot(m, np.einsum("ij,ij->i", d, d)) / vol / R**2)
    g0 = holder_on_ball(pair.rho0, R, pair.alpha, holder_points, c)
    g1 = holder_on_ball(pair.rho1, R, pair.alpha, holder_points, c)
    return ExcessReport(float(R), e, g0 + g1, R ** (2 * pair.alpha) * (g0**2 + g1**2))


def instance_excess(inst: MapInstance, R: float, cfg: RegularityConfig) -> ExcessReport:
    """Lattice quadrature of the excess of ``inst`` on ``B_R(0)``."""
    pts, cell = ball_lattice(R, cfg.quad_points)
    w = inst.rho0(pts) * cell
    vol = cell * np.count_nonzero(w > 0)
    if vol == 0:
        raise DomainError(f"rho0 vanishes on B_{R:g}")
    d = inst.T(pts) - pts
    e = float(np.dot(w, np.einsum("ij,ij->i", d, d)) / vol / R**2)
    g0 = holder_on_ball(inst.rho0, R, inst.alpha, cfg.holder_points)
    g1 = holder_on_ball(inst.rho1, R, inst.alpha, cfg.holder_points)
    return ExcessReport(float(R), e, g0 + g1, R ** (2 * inst.alpha) * (g0**2 + g1**2))


# ---------------------------------------------------------------------------
# Harmonic approximation


def local_interpolant(inst: MapInstance, cfg: RegularityConfig, times=None) -> Interpolant:
    """Displacement interpolation of a unit-scale instance on a local grid.

    Atoms sit on the grid nodes inside ``[-a, a]^2`` with masses
    ``rho0 h^2``, so the ``t = 0`` slice equals ``rho0`` at the nodes.
    """
    W, n = cfg.local_halfwidth, cfg.local_cells
    h = 2 * W / n
    nodes = GridDensity((-W, -W), h, np.ones((n, n)), inst.alpha).nodes()
    vals = np.asarray(inst.rho0(nodes), dtype=float)
    keep = (np.max(np.abs(nodes), axis=1) <= cfg.local_atoms_halfwidth) & (vals > 0)
    if not keep.any():
        raise DegenerateInputError("rho0 vanishes on the local window")
    src = nodes[keep]
    m = vals[keep] * h * h
    tgt = inst.T(src)
    # widen by whole cells (same spacing) until every target fits
    reach = float(np.max(np.abs(tgt))) + h
    extra = max(0, int(np.ceil((reach - W) / h)))
    if extra:
        W, n = W + extra * h, n + 2 * extra
        nodes = GridDensity((-W, -W), h, np.ones((n, n)), inst.alpha).nodes()
        vals = np.asarray(inst.rho0(nodes), dtype=float)
        keep = (np.max(np.abs(nodes), axis=1) <= cfg.local_atoms_halfwidth) & (vals > 0)
    grid0 = GridDensity((-W, -W), h, np.ones((n, n)), inst.alpha)
    sol = TransportSolution.from_map(src, tgt, m)
    grid_vals = np.where(keep, vals, 0.0).reshape(n, n)
    rho0 = grid0.with_values(grid_vals)
    return displacement_interpolate(sol, rho0, times)


@dataclass(frozen=True)
class GoodRadius:
    R: float
    f: Array
    fbar: Array
    shells: Array
    values: Array

    @property
    def mean_value(self) -> float:
        return float(self.values.mean())


def select_good_radius(interp: Interpolant, n_shells: int = 8, n_theta: int = 128,
                       center=(0.0, 0.0), scale: float = 1.0) -> GoodRadius:
    """Shell in ``(scale/2, scale)`` minimising ``int_0^1 int_{dB_R} |j|^2``."""
    shells = scale * (0.5 + (np.arange(n_shells) + 0.5) / (2 * n_shells))
    sm = interp.smoothed()
    g = sm.grid
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    nu = np.column_stack([np.cos(th), np.sin(th)])
    wt = _trapezoid_weights(sm.times)
    values = np.empty(n_shells)
    mass_seen = 0.0
    from .density import bilinear
    for i, R in enumerate(shells):
        pts = np.asarray(center, dtype=float) + R * nu
        acc = 0.0
        for k in range(len(sm.times)):
            jf = sm.flux_slices[k]
            j1 = bilinear(g.origin, g.h, jf[..., 0], pts)
            j2 = bilinear(g.origin, g.h, jf[..., 1], pts)
            acc += wt[k] * np.sum(j1**2 + j2**2)
            mass_seen += np.sum(sm.rho_slices[k](pts))
        values[i] = acc * 2 * np.pi * R / n_theta
    if mass_seen == 0:
        raise DegenerateInputError("no density on any candidate shell")
    i = int(np.argmin(values))  # first minimiser, i.e. smallest R on ties
    R = float(shells[i])
    f = boundary_flux(interp, center, R, n_theta)
    return GoodRadius(R, f, wt @ f, shells, values)


@dataclass(frozen=True, eq=False)
class HarmonicApproximation:
    phi: HarmonicField
    good: GoodRadius
    residual: float
    excess: ExcessReport
    energy: float

    @property
    def energy_ratio(self) -> float:
        bound = self.excess.excess + self.excess.gamma**2
        return self.energy / bound if bound > 0 else 0.0


def harmonic_approximation(inst: MapInstance, cfg: RegularityConfig) -> HarmonicApproximation:
    """Harmonic ``phi`` for a unit-scale instance and ``int_{B_1/8} |T - x - grad phi|^2 rho0``."""
    rep = instance_excess(inst, 1.0, cfg)
    interp = local_interpolant(inst, cfg)
    good = select_good_radius(interp, cfg.n_shells, cfg.n_theta)
    phi = solve_neumann_laplace(good.fbar, cfg.n_modes, good.R)
    sol = interp.sol
    inner = np.hypot(*sol.sources.T) < 0.125
    x = sol.sources[inner]
    d = sol.map[inner] - x - phi.gradient(x)
    residual = float(np.dot(sol.masses[inner], np.einsum("ij,ij->i", d, d)))
    return HarmonicApproximation(phi, good, residual, rep, phi.energy(0.125))


# ---------------------------------------------------------------------------
# Tilting


@dataclass(frozen=True)
class AffineFrame:
    B: Array
    b: Array
    lam: float

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if abs(np.linalg.det(B) - 1) > 1e-12:
            raise DomainError(f"det B = {np.linalg.det(B):.17g} != 1")
        if abs(B[0, 1] - B[1, 0]) > 1e-12:
            raise DomainError("B is not symmetric")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")

    @classmethod
    def identity(cls) -> "AffineFrame":
        return cls(np.eye(2), np.zeros(2), 1.0)


@dataclass(frozen=True, eq=False)
class StepResult:
    frame: AffineFrame
    instance: MapInstance
    before: ExcessReport
    after: ExcessReport
    trace_residual: float
    improvement_bound: float
    frame_ratio: float
    lambda_ratio: float
    normalisation_error: float
    cfg: RegularityConfig = field(repr=False)

    @property
    def improved(self) -> bool:
        return self.after.excess <= self.improvement_bound + EXCESS_FLOOR

    @property
    def frame_ok(self) -> bool:
        c = self.cfg.frame_constant
        return self.frame_ratio <= c and self.lambda_ratio <= c

    @property
    def passed(self) -> bool:
        return self.improved and self.frame_ok


def one_step_improvement(inst: MapInstance, R: float, cfg: RegularityConfig) -> StepResult:
    """Tilt by ``B = exp(-A/2)``, ``b = grad phi(0)``, ``lam = rho1(b)^{1/2}``.

    ``inst`` must be normalised, ``rho0(0) = rho1(0) = 1``. The new excess is
    evaluated at ``theta R``.
    """
    before = instance_excess(inst, R, cfg)
    theta, ap = cfg.theta, cfg.alpha_prime
    bound = theta ** (2 * ap) * before.excess + cfg.C_theta * before.holder_terms
    if before.excess == 0.0:
        frame = AffineFrame.identity()
        after = instance_excess(inst, theta * R, cfg)
        return StepResult(frame, inst, before, after, 0.0, bound, 0.0, 0.0, 0.0, cfg)
    ha = harmonic_approximation(inst.rescaled((0.0, 0.0), R), cfg)
    b = R * ha.phi.gradient_at_origin()
    A = ha.phi.hessian_at_origin()
    tr = 0.5 * np.trace(A)
    A0 = A - tr * np.eye(2)
    B = sym2_exp(A0)
    r1b = float(inst.rho1(b[None, :])[0])
    if not r1b > 0:
        raise DomainError(f"rho1(b) = {r1b:g} is not positive")
    lam = np.sqrt(r1b)
    frame = AffineFrame(B, b, lam)
    new = inst.tilted(B, b, lam)
    after = instance_excess(new, theta * R, cfg)
    crit = before.criterion_value
    fr = (np.sum((B - np.eye(2)) ** 2) + np.dot(b, b) / R**2) / crit
    lr = (lam - 1) ** 2 / crit
    origin = np.zeros((1, 2))
    norm_err = max(abs(float(new.rho0(origin)[0]) - 1), abs(float(new.rho1(origin)[0]) - 1))
    return StepResult(frame, new, before, after, float(abs(tr)), bound, float(fr), float(lr),
                      norm_err, cfg)


# ---------------------------------------------------------------------------
# Campanato iteration


@dataclass(frozen=True)
class DecayRow:
    k: int
    R_k: float
    excess: float
    gamma: float
    criterion: float
    ratio_to_theta2alpha: float
    normB_minus_I: float
    norm_b: float
    lam: float
    passed: bool


@dataclass(frozen=True, eq=False)
class IterationState:
    k: int
    A_k: Array
    d_k: Array
    Lambda_k: float
    theta: float
    alpha_prime: float
    excess_history: list
    holder_history: list
    rows: list
    campanato: list
    breakdown: int | None
    sup_ratio: float
    sup_bound: float
    frame_ratios: list = field(default_factory=list)
    lambda_ratios: list = field(default_factory=list)

    @property
    def decay_ok(self) -> bool:
        return self.sup_ratio <= self.sup_bound

    @property
    def passed(self) -> bool:
        return self.breakdown is None and self.decay_ok and all(r.passed for r in self.rows)


def campanato_quantity(T, r: float, alpha: float, n: int = 32) -> float:
    """``min_{A,b} r^{-2(1+alpha)} avg_{B_r} |T - (A x + b)|^2`` by least squares."""
    pts, _ = ball_lattice(r, n)
    Y = T(pts)
    X = np.column_stack([pts, np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    res = Y - X @ coef
    return float(np.mean(np.sum(res**2, axis=1)) / r ** (2 * (1 + alpha)))


def campanato_iterate(inst: MapInstance, R0: float, cfg: RegularityConfig,
                      K: int | None = None) -> IterationState:
    """Iterate the tilting step ``K`` times from scale ``R0``."""
    K = cfg.K if K is None else K
    theta, alpha = cfg.theta, inst.alpha
    rows: list[DecayRow] = []
    hist, holder, camp = [], [], []
    A_k = np.eye(2)
    d_k = np.zeros(2)
    Lam = 1.0
    cur = inst
    R = R0
    rep = instance_excess(cur, R, cfg)
    E0, crit0 = rep.excess, rep.excess + rep.holder_terms
    breakdown = None
    frame = AffineFrame.identity()
    step_ok = True
    fratios, lratios = [], []
    for k in range(K + 1):
        hist.append(rep.excess)
        holder.append(rep.gamma)
        camp.append(campanato_quantity(inst.T, theta**k * R0 / 2, alpha))
        rows.append(DecayRow(k, R, rep.excess, rep.gamma, rep.criterion_value,
                             rep.excess / theta ** (2 * k * alpha),
                             float(np.linalg.norm(frame.B - np.eye(2))),
                             float(np.linalg.norm(frame.b)), float(frame.lam), step_ok))
        if k == K:
            break
        if rep.criterion_value > cfg.epsilon_threshold:
            breakdown = k
            break
        step = one_step_improvement(cur, R, cfg)
        fratios.append(step.frame_ratio)
        lratios.append(step.lambda_ratio)
        frame = step.frame
        step_ok = step.passed
        A_k = frame.B @ A_k
        d_k = frame.lam * frame.B @ (d_k + frame.b) if k else frame.lam * frame.B @ frame.b
        Lam *= frame.lam
        cur = step.instance
        R = theta * R
        rep = step.after
    ratios = [r.ratio_to_theta2alpha for r in rows]
    bound = cfg.C2 * crit0
    return IterationState(len(rows) - 1, A_k, d_k, Lam, theta, cfg.alpha_prime, hist, holder,
                          rows, camp, breakdown, float(max(ratios)), float(bound), fratios, lratios)


def write_decay_csv(state: IterationState, path) -> None:
    cols = "k,R_k,excess,gamma,criterion,ratio_to_theta2alpha,normB_minus_I,norm_b,lambda,pass"
    with open(path, "w") as fh:
        fh.write(cols + "\n")
        for r in state.rows:
            fh.write(f"{r.k},{r.R_k:.17g},{r.excess:.17g},{r.gamma:.17g},{r.criterion:.17g},"
                     f"{r.ratio_to_theta2alpha:.17g},{r.normB_minus_I:.17g},{r.norm_b:.17g},"
                     f"{r.lam:.17g},{int(r.passed)}\n")


# ---------------------------------------------------------------------------
# Classification


@dataclass(frozen=True, eq=False)
class Classification:
    points: Array
    criterion: Array
    labels: Array  # "regular", "singular" or "skipped"
    shape: tuple[int, int] | None = None

    @property
    def regular_fraction(self) -> float:
        return float(np.mean(self.labels == "regular"))

    def flagged_components(self) -> int:
        """Connected components (8-neighbour) of non-regular scan points."""
        if self.shape is None:
            raise DomainError("component count needs a rectangular scan grid")
        mask = (self.labels != "regular").reshape(self.shape)
        _, n = ndimage.label(mask, structure=np.ones((3, 3)))
        return int(n)

    def largest_component_share(self) -> float:
        if self.shape is None:
            raise DomainError("component count needs a rectangular scan grid")
        mask = (self.labels != "regular").reshape(self.shape)
        lab, n = ndimage.label(mask, structure=np.ones((3, 3)))
        if n == 0:
            return 1.0
        sizes = np.bincount(lab.ravel())[1:]
        return float(sizes.max() / sizes.sum())

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x1,x2,criterion,label\n")
            for p, c, lab in zip(self.points, self.criterion, self.labels):
                fh.write(f"{p[0]:.17g},{p[1]:.17g},{c:.17g},{lab}\n")


def scan_grid(lo: float, hi: float, n: int) -> tuple[Array, tuple[int, int]]:
    s = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(s, s, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()]), (n, n)


def _affine_fit(x, y):
    X = np.column_stack([x, np.ones(len(x))])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef[:2].T, coef[2]


def _sym_sqrt(A):
    w, V = np.linalg.eigh(A)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def point_criterion(sol: TransportSolution, pair: DensityPair, x0, cfg: RegularityConfig,
                    tree_src=None, tree_tgt=None) -> float:
    """Two-sided epsilon-regularity criterion at ``x0`` after affine normalisation.

    Returns ``nan`` when the local fit is not positive definite.
    """
    tree_src = tree_src or cKDTree(sol.sources)
    tree_tgt = tree_tgt or cKDTree(sol.targets)
    x0 = np.asarray(x0, dtype=float)
    _, idx = tree_src.query(x0, k=min(cfg.fit_neighbors, sol.n))
    A, c = _affine_fit(sol.sources[idx], sol.map[idx])
    A = 0.5 * (A + A.T)
    if np.any(np.linalg.eigvalsh(A) <= 0):
        return np.nan
    y0 = A @ x0 + c
    Ah, Aih = _sym_sqrt(A)
    detA = float(np.linalg.det(A))
    r00 = float(pair.rho0(x0[None, :])[0])
    if r00 <= 0:
        return np.nan
    spacing = np.sqrt(np.sum(sol.masses / np.maximum(pair.rho0(sol.sources), 1e-300)) / sol.n)
    R = cfg.scan_radius_factor * spacing
    two = 2 * R
    scale = np.sqrt(detA) / r00  # mass factor of the hat variables

    # forward: x^ = A^{1/2}(x - x0), T^(x^) = A^{-1/2}(T(x) - y0)
    near = tree_src.query_ball_point(x0, two * np.linalg.norm(Aih, 2) * 1.01)
    xs = (sol.sources[near] - x0) @ Ah.T
    inside = np.hypot(*xs.T) < two
    ts = (sol.map[near] - y0) @ Aih.T
    d = ts[inside] - xs[inside]
    fwd = scale * np.dot(sol.masses[near][inside], np.einsum("ij,ij->i", d, d))

    # inverse: y^ = A^{-1/2}(y - y0), T^-1(y^) = A^{1/2}(T^-1(y) - x0)
    near = tree_tgt.query_ball_point(y0, two * np.linalg.norm(Ah, 2) * 1.01)
    ys = (sol.targets[near] - y0) @ Aih.T
    inside = np.hypot(*ys.T) < two
    inv_img = sol.sources[sol.inverse_perm[near]]
    us = (inv_img - x0) @ Ah.T
    d = us[inside] - ys[inside]
    inv = scale * np.dot(sol.masses[sol.inverse_perm[near]][inside], np.einsum("ij,ij->i", d, d))

    def rho0_hat(p):
        return pair.rho0(p @ Aih.T + x0) / r00

    def rho1_hat(p):
        return pair.rho1(p @ Ah.T + y0) * detA / r00

    g0 = holder_on_ball(rho0_hat, two, pair.alpha, cfg.holder_points)
    g1 = holder_on_ball(rho1_hat, two, pair.alpha, cfg.holder_points)
    norm = two ** (-(2 + 2))
    return float(norm * (fwd + inv) + R ** (2 * pair.alpha) * (g0**2 + g1**2))


def classify_regular_points(sol: TransportSolution, pair: DensityPair, cfg: RegularityConfig,
                            points, shape=None) -> Classification:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ts, tt = cKDTree(sol.sources), cKDTree(sol.targets)
    crit = np.array([point_criterion(sol, pair, p, cfg, ts, tt) for p in pts])
    labels = np.where(np.isnan(crit), "skipped",
                      np.where(crit <= cfg.epsilon_threshold, "regular", "singular"))
    return Classification(pts, crit, labels.astype(object), shape)
