"""Named test instances: identity, smooth perturbation, rigid shift and crease."""

from __future__ import annotations

import numpy as np

from .density import DensityPair, generate_test_density, read_density, scale_to_mass
from .errors import ConfigError

INSTANCE_KINDS = ("identity", "smooth", "shift", "crease", "custom")


def identity_pair(n: int = 64, alpha: float = 0.5) -> DensityPair:
    u = generate_test_density("uniform", n=n, alpha=alpha)
    return DensityPair(u, u)


def smooth_pair(n: int = 64, eps: float = 0.02, alpha: float = 0.5) -> DensityPair:
    """``rho0 = 1 + eps sin(x1)``, ``rho1 = 1 - eps sin(x1)`` on ``[-1, 1]^2``.

    Both densities equal 1 at the origin and the map depends on ``x1`` only.
    """
    kw = dict(n=n, alpha=alpha, kx=1.0, ky=0.0, py=np.pi / 2)
    return DensityPair(generate_test_density("smooth_perturbation", eps=eps, **kw),
                       generate_test_density("smooth_perturbation", eps=-eps, **kw))


def shift_pair(eps: float, n: int = 128, half_width: float = 2.0, support: float = 1.5,
               alpha: float = 0.5) -> DensityPair:
    """Uniform density on ``[-support, support]^2`` and its exact translate by ``eps e1``.

    The grid is wider than the support so that every trajectory stays on it.
    """
    kw = dict(n=n, half_width=half_width, alpha=alpha)
    out = []
    for shift in ((0.0, 0.0), (eps, 0.0)):
        g = generate_test_density("uniform", shift=shift, **kw)
        rel = g.nodes() - np.asarray(shift)
        inside = np.max(np.abs(rel), axis=1) <= support
        out.append(g.with_values(np.where(inside, 1.0, 0.0).reshape(n, n)))
    return DensityPair(*out)


def crease_pair(n: int = 64, gap: float = 0.2, alpha: float = 0.5) -> DensityPair:
    """Uniform source onto two strips ``|x1| >= gap/2``.

    The optimal map ``x1 -> (1 - gap/2) x1 + (gap/2) sign(x1)`` jumps across
    ``x1 = 0``, so the map is singular along that line and affine elsewhere.
    """
    u = generate_test_density("uniform", n=n, alpha=alpha)
    x1 = u.nodes()[:, 0].reshape(u.shape)
    strips = u.with_values(np.where(np.abs(x1) >= gap / 2, 1.0, 0.0))
    return DensityPair(u, scale_to_mass(strips, u.mass))


def _density_from_entry(entry: dict, n: int, alpha: float):
    if "file" in entry:
        return read_density(entry["file"])
    kind = entry.get("kind")
    if kind is None:
        raise ConfigError("instance.rho0/rho1 needs 'kind' or 'file'")
    return generate_test_density(kind, n=n, alpha=alpha, **dict(entry.get("params", {})))


def build_pair(entry: dict) -> DensityPair:
    """Instance from a config mapping (see ``docs/formats.md``)."""
    kind = entry.get("kind", "identity")
    n = int(entry.get("n", 64))
    alpha = float(entry.get("alpha", 0.5))
    params = dict(entry.get("params", {}))
    if kind == "identity":
        return identity_pair(n, alpha)
    if kind == "smooth":
        return smooth_pair(n, float(params.get("eps", 0.02)), alpha)
    if kind == "shift":
        return shift_pair(float(params.get("eps", 0.1)), n, float(params.get("half_width", 2.0)),
                          float(params.get("support", 1.5)), alpha)
    if kind == "crease":
        return crease_pair(n, float(params.get("gap", 0.2)), alpha)
    if kind == "custom":
        if "rho0" not in entry or "rho1" not in entry:
            raise ConfigError("custom instance needs instance.rho0 and instance.rho1")
        r0 = _density_from_entry(entry["rho0"], n, alpha)
        r1 = _density_from_entry(entry["rho1"], n, alpha)
        return DensityPair(r0, scale_to_mass(r1, r0.mass))
    raise ConfigError(f"instance.kind must be one of {', '.join(INSTANCE_KINDS)}, got {kind!r}")
