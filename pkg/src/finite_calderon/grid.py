"""Periodic grid on the unit torus, embedded domains and their boundary meshes.

Cells are centred at x_j = (j + 1/2) h.  The interior I of a domain is the set of
cells whose centres lie strictly inside the box or ball.  Boundary panels are the
exterior cells that share a face with I; each panel centroid is its cell centre,
so a trace is simply the value at that node.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy import ndimage

from .errors import DomainError

__all__ = [
    "TorusGrid",
    "BoxSpec",
    "BallSpec",
    "parse_domain_spec",
    "Domain",
    "BoundaryMesh",
    "BoundaryFunction",
    "build_domain",
    "sobolev_norm",
    "boundary_pairing",
    "trace",
    "extend_by_zero",
]

_FACE_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


@dataclass(frozen=True)
class TorusGrid:
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 8:
            raise DomainError(f"grid needs an integer m >= 8, got {self.m}")

    @property
    def h(self) -> float:
        return 1.0 / self.m

    @property
    def shape(self):
        return (self.m, self.m, self.m)

    @property
    def size(self) -> int:
        return self.m**3

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @cached_property
    def coords(self) -> np.ndarray:
        return (np.arange(self.m) + 0.5) * self.h

    def mesh(self):
        """Three coordinate arrays of shape (m, m, m), 'ij' indexing."""
        return np.meshgrid(self.coords, self.coords, self.coords, indexing="ij")

    def points(self, flat_idx) -> np.ndarray:
        ijk = np.stack(np.unravel_index(np.asarray(flat_idx), self.shape), axis=-1)
        return (ijk + 0.5) * self.h

    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, symmetric range [-m/2, m/2)."""
        return np.fft.fftfreq(self.m, d=1.0 / self.m).round().astype(np.int64)

    def wrap(self, ijk):
        return np.mod(ijk, self.m)


@dataclass(frozen=True)
class BoxSpec:
    lo: float
    hi: float

    kind = "box"

    def descriptor(self) -> str:
        return f"box:{self.lo!r},{self.hi!r}"

    def contains(self, x, y, z):
        lo, hi = self.lo, self.hi
        return (x > lo) & (x < hi) & (y > lo) & (y < hi) & (z > lo) & (z < hi)

    def inside_torus(self) -> bool:
        return 0.0 < self.lo < self.hi < 1.0

    @property
    def center(self):
        c = 0.5 * (self.lo + self.hi)
        return np.array([c, c, c])

    def true_area(self) -> float:
        return 6.0 * (self.hi - self.lo) ** 2

    def true_volume(self) -> float:
        return (self.hi - self.lo) ** 3


@dataclass(frozen=True)
class BallSpec:
    center: tuple
    radius: float

    kind = "ball"

    def descriptor(self) -> str:
        c = ",".join(repr(float(v)) for v in self.center)
        return f"ball:{c},{self.radius!r}"

    def contains(self, x, y, z):
        c = self.center
        return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 < self.radius**2

    def inside_torus(self) -> bool:
        c = np.asarray(self.center, dtype=float)
        return self.radius > 0 and bool(np.all(c - self.radius > 0) and np.all(c + self.radius < 1))

    def true_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def true_volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3


def parse_domain_spec(text: str):
    """Parse ``box:lo,hi`` or ``ball:cx,cy,cz,r``."""
    kind, _, rest = text.strip().partition(":")
    try:
        vals = [float(v) for v in rest.split(",")]
    except ValueError as exc:
        raise DomainError(f"cannot parse domain spec {text!r}") from exc
    if kind == "box" and len(vals) == 2:
        return BoxSpec(vals[0], vals[1])
    if kind == "ball" and len(vals) == 4:
        return BallSpec(tuple(vals[:3]), vals[3])
    raise DomainError(f"cannot parse domain spec {text!r}")


@dataclass
class BoundaryFunction:
    values: np.ndarray
    mesh: "BoundaryMesh"
    tag: str = "trace"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mesh.n,):
            raise ValueError(f"boundary function has {self.values.shape}, mesh has {self.mesh.n} panels")


class BoundaryMesh:
    """Panels of a staircase boundary with area weights, normals and a graph Laplacian.

    ``link_panel[k]`` and ``link_inner[k]`` name the two cells of the k-th face
    crossing the boundary; ``link_dir[k]`` points from the interior cell outward.
    """

    def __init__(self, grid, nodes, normals, link_panel, link_inner, link_dir):
        self.grid = grid
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.normals = np.asarray(normals, dtype=float)
        self.link_panel = np.asarray(link_panel, dtype=np.int64)
        self.link_inner = np.asarray(link_inner, dtype=np.int64)
        self.link_dir = np.asarray(link_dir, dtype=np.int64)
        h2 = grid.h**2
        proj = np.abs(np.einsum("kj,kj->k", self.normals[self.link_panel], self.link_dir))
        self.weights = np.bincount(self.link_panel, weights=h2 * proj, minlength=self.n)
        self.link_count = np.bincount(self.link_panel, minlength=self.n)

    @property
    def n(self) -> int:
        return self.nodes.size

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.grid.points(self.nodes)

    @property
    def total_area(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Graph Laplacian on panels: face neighbours weight 1, edge diagonals 1/2, halved.

        With the diagonal area matrix W, L v = lam W v approximates the
        Laplace-Beltrami eigenproblem on flat faces.
        """
        g = self.grid
        pos = np.full(g.size, -1, dtype=np.int64)
        pos[self.nodes] = np.arange(self.n)
        ijk = np.stack(np.unravel_index(self.nodes, g.shape), axis=-1)
        rows, cols, vals = [], [], []
        for d in np.ndindex(3, 3, 3):
            off = np.array(d) - 1
            l1 = np.abs(off).sum()
            if l1 == 0 or l1 == 3:
                continue
            nb = np.ravel_multi_index(tuple(g.wrap(ijk + off).T), g.shape)
            hit = pos[nb]
            ok = hit >= 0
            rows.append(np.nonzero(ok)[0])
            cols.append(hit[ok])
            vals.append(np.full(ok.sum(), 1.0 if l1 == 1 else 0.5))
        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
        )
        deg = np.asarray(A.sum(axis=1)).ravel()
        return (0.5 * (sp.diags(deg) - A)).tocsr()

    @cached_property
    def spectrum(self):
        """(lam, V) with L V = W V diag(lam) and V^T W V = I."""
        s = 1.0 / np.sqrt(self.weights)
        Lt = (self.laplacian.toarray() * s[:, None]) * s[None, :]
        lam, U = scipy.linalg.eigh(Lt)
        lam = np.clip(lam, 0.0, None)
        return lam, U * s[:, None]

    def spectral_coefficients(self, f) -> np.ndarray:
        lam, V = self.spectrum
        return V.T @ (self.weights[..., None] * f if np.ndim(f) > 1 else self.weights * f)

    def norm_transform(self, s: float) -> np.ndarray:
        """Matrix T_s with ||f||_s = ||T_s f||_2."""
        lam, V = self.spectrum
        return ((1.0 + lam) ** (s / 2.0))[:, None] * (V.T * self.weights[None, :])

    def norm_transform_inverse(self, s: float) -> np.ndarray:
        lam, V = self.spectrum
        return V * ((1.0 + lam) ** (-s / 2.0))[None, :]

    def function(self, values, tag="trace") -> BoundaryFunction:
        return BoundaryFunction(values, self, tag)


@dataclass
class Domain:
    grid: TorusGrid
    spec: object
    mask: np.ndarray
    mesh: BoundaryMesh
    interior: np.ndarray = field(repr=False)

    @property
    def n_interior(self) -> int:
        return self.interior.size

    @property
    def volume(self) -> float:
        return self.n_interior * self.grid.cell_volume

    @cached_property
    def hash(self) -> str:
        payload = json.dumps({"m": self.grid.m, "spec": self.spec.descriptor()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @cached_property
    def interior_position(self) -> np.ndarray:
        """Map from flat grid index to position in ``interior`` (or -1)."""
        pos = np.full(self.grid.size, -1, dtype=np.int64)
        pos[self.interior] = np.arange(self.interior.size)
        return pos

    def interior_points(self) -> np.ndarray:
        return self.grid.points(self.interior)


def build_domain(grid: TorusGrid, spec) -> Domain:
    if not spec.inside_torus():
        raise DomainError(f"{spec.descriptor()} touches the torus seam; it must lie strictly inside (0,1)^3")
    X, Y, Z = grid.mesh()
    mask = spec.contains(X, Y, Z)
    if not mask.any():
        raise DomainError(f"{spec.descriptor()} contains no cell centres at m={grid.m}")
    occupied = [np.nonzero(mask.any(axis=tuple(a for a in range(3) if a != ax)))[0] for ax in range(3)]
    width = min(o.size for o in occupied)
    if width < 4:
        raise DomainError(f"resolution too coarse: {width} cells across {spec.descriptor()} at m={grid.m}")
    lo = min(o.min() for o in occupied)
    hi = max(o.max() for o in occupied)
    if lo < 2 or hi > grid.m - 3:
        raise DomainError(f"{spec.descriptor()} leaves fewer than two exterior layers before the seam at m={grid.m}")

    labels, count = ndimage.label(~mask)
    if count != 1:
        raise DomainError(f"complement of {spec.descriptor()} is not connected ({count} components)")

    interior = np.flatnonzero(mask.ravel())
    ijk = np.stack(np.unravel_index(interior, grid.shape), axis=-1)
    flat_mask = mask.ravel()
    link_outer, link_inner, link_dir = [], [], []
    for d in _FACE_DIRS:
        nb = np.ravel_multi_index(tuple((ijk + d).T), grid.shape)
        out = ~flat_mask[nb]
        link_outer.append(nb[out])
        link_inner.append(interior[out])
        link_dir.append(np.broadcast_to(d, (out.sum(), 3)))
    link_outer = np.concatenate(link_outer)
    link_inner = np.concatenate(link_inner)
    link_dir = np.concatenate(link_dir)
    nodes, link_panel = np.unique(link_outer, return_inverse=True)

    if spec.kind == "box":
        normals = np.zeros((nodes.size, 3))
        np.add.at(normals, link_panel, link_dir.astype(float))
    else:
        normals = grid.points(nodes) - np.asarray(spec.center, dtype=float)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    mesh = BoundaryMesh(grid, nodes, normals, link_panel, link_inner, link_dir)
    return Domain(grid=grid, spec=spec, mask=mask, mesh=mesh, interior=interior)


def boundary_pairing(f, g, mesh: BoundaryMesh):
    """Area-weighted bilinear pairing sum_y w_y f(y) g(y) (no conjugation)."""
    return np.sum(mesh.weights * np.asarray(f) * np.asarray(g))


def sobolev_norm(f, s: float, mesh: BoundaryMesh | None = None) -> float:
    if isinstance(f, BoundaryFunction):
        mesh, f = f.mesh, f.values
    if mesh is None:
        raise ValueError("sobolev_norm needs a mesh")
    if s not in (-0.5, 0.5, 0.0):
        raise ValueError(f"order must be -1/2, 0 or 1/2, got {s}")
    lam, _ = mesh.spectrum
    c = mesh.spectral_coefficients(np.asarray(f))
    return float(np.sqrt(np.sum((1.0 + lam) ** s * np.abs(c) ** 2)))


def trace(u, domain: Domain, tag="trace") -> BoundaryFunction:
    u = np.asarray(u)
    if u.size != domain.grid.size:
        raise ValueError(f"trace expects a full grid function of size {domain.grid.size}")
    return BoundaryFunction(u.reshape(-1)[domain.mesh.nodes], domain.mesh, tag)


def extend_by_zero(q, domain: Domain) -> np.ndarray:
    q = np.asarray(q)
    out = np.zeros(domain.grid.size, dtype=q.dtype)
    if q.size == domain.n_interior:
        out[domain.interior] = q.reshape(-1)
    elif q.size == domain.grid.size:
        out[domain.interior] = q.reshape(-1)[domain.interior]
    else:
        raise ValueError(f"cannot extend array of size {q.size}")
    return out.reshape(domain.grid.shape)
