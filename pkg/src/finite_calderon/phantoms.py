"""Phantom library: elements of W, W plus a known out-of-W component, smooth bumps,
and the Liouville transform of a conductivity."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .forward import Potential
from .grid import Domain

__all__ = [
    "bump",
    "bump_potential",
    "random_phantom",
    "w_element",
    "out_of_w_component",
    "inject_eps",
    "liouville_transform",
    "laplacian_periodic",
]


def bump(points, center, radius: float) -> np.ndarray:
    """C-infinity bump exp(1 - 1/(1 - s^2)), s = |x - c| / radius, equal to 1 at the centre."""
    s2 = np.sum((np.asarray(points) - np.asarray(center)) ** 2, axis=-1) / radius**2
    out = np.zeros(s2.shape)
    inside = s2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s2[inside]))
    return out


def bump_potential(domain: Domain, center, radius: float, amplitude: float, provenance: str = "bump") -> Potential:
    vals = np.zeros(domain.grid.size)
    vals[domain.interior] = amplitude * bump(domain.interior_points(), center, radius)
    return Potential(domain, vals, provenance=provenance)


def random_phantom(domain: Domain, seed: int, amplitude: float = 1.0, bumps: int = 3) -> Potential:
    """Sum of a few bumps with seeded centres, radii and signs, confined to the domain."""
    rng = np.random.default_rng(seed)
    pts = domain.interior_points()
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(np.min(hi - lo))
    vals = np.zeros(domain.n_interior)
    for _ in range(bumps):
        radius = rng.uniform(0.2, 0.4) * span
        center = rng.uniform(lo + 0.3 * span, hi - 0.3 * span)
        vals += rng.uniform(-1.0, 1.0) * bump(pts, center, radius)
    peak = np.max(np.abs(vals))
    full = np.zeros(domain.grid.size)
    full[domain.interior] = amplitude * vals / (peak if peak > 0 else 1.0)
    return Potential(domain, full, provenance=f"random_phantom(seed={seed})")


def w_element(W, coeffs, provenance: str = "W element") -> Potential:
    return W.potential(np.asarray(coeffs, dtype=float), provenance)


def out_of_w_component(W, seed: int) -> np.ndarray:
    """Unit-L2 grid function supported in the domain and orthogonal to W."""
    d = W.domain
    g = random_phantom(d, seed, bumps=4).values.copy()
    # add cell-scale texture so the component is not nearly inside a smooth W
    rng = np.random.default_rng(seed + 7919)
    g[d.interior] += 0.3 * rng.standard_normal(d.n_interior)
    g -= W.synth(W.coeffs(g))
    nrm = np.sqrt(d.grid.cell_volume * np.sum(g * g))
    if nrm == 0:
        raise ValueError("W fills the domain; no out-of-W component exists")
    return g / nrm


def inject_eps(base: Potential, W, eps: float, seed: int) -> Potential:
    """base + eps * (unit component orthogonal to W), so ||P_W^perp q|| = eps exactly when base is in W."""
    vals = base.values + eps * out_of_w_component(W, seed)
    return Potential(base.domain, vals, provenance=f"{base.provenance} + eps={eps:g}(seed={seed})")


def laplacian_periodic(u, h: float) -> np.ndarray:
    out = -6.0 * u
    for ax in range(3):
        out = out + np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax)
    return out / h**2


def liouville_transform(sigma, domain: Domain, lam: float, collar: float | None = None) -> Potential:
    """q = Delta sqrt(sigma) / sqrt(sigma) by centred differences.

    sigma is a full-grid array; it must satisfy 1/lam <= sigma <= lam everywhere and
    equal 1 outside the domain and on cells within ``collar`` of its complement
    (default two cells).
    """
    g = domain.grid
    sigma = np.asarray(sigma, dtype=float).reshape(g.shape)
    if lam < 1.0:
        raise ValueError("lam must be at least 1")
    lo, hi = float(sigma.min()), float(sigma.max())
    if lo < 1.0 / lam or hi > lam:
        raise DomainError(f"conductivity range [{lo:.4g}, {hi:.4g}] violates bounds [{1 / lam:.4g}, {lam:.4g}]")
    collar = 2.0 * g.h if collar is None else collar
    mask = domain.mask.reshape(g.shape)
    depth = ndimage.distance_transform_edt(mask) * g.h
    ring = depth < collar + 1e-12  # includes the exterior (depth 0)
    bad = np.abs(sigma[ring] - 1.0).max(initial=0.0)
    if bad > 1e-12:
        raise DomainError(f"conductivity differs from 1 by {bad:.3e} within the boundary collar")
    root = np.sqrt(sigma)
    q = laplacian_periodic(root, g.h) / root
    q = q.reshape(-1)
    q[~domain.mask.reshape(-1)] = 0.0
    return Potential(domain, q, provenance=f"liouville(lam={lam:g})")
