"""Generalized single-layer operator built on the discrete Green function of -Delta_h + q0.

A panel density phi is spread as the grid source w_y phi(y) / h^3 at the panel
node y.  The single-layer field is u = exp(zeta.x) (L~ + q0)^{-1} [exp(-zeta.y) w phi / h^3]
with L~ the conjugated Laplacian, so (-Delta_h + q0) u equals that source exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .cgo import ComplexFrequency, FaddeevGreen
from .containers import read_container, write_container
from .errors import CgoError, ContainerError, SingleLayerError
from .forward import Potential
from .grid import BoundaryFunction

__all__ = [
    "SingleLayer",
    "SingleLayerOp",
    "single_layer_apply",
    "single_layer_field",
    "single_layer_matrix",
    "invert_single_layer",
    "jump_diagnostic",
]

DENSE_SUPPORT_LIMIT = 3000


def _zeta_of(zeta, h):
    if isinstance(zeta, ComplexFrequency):
        return zeta.lattice(h)[0]
    return np.asarray(zeta, dtype=complex)


class SingleLayer:
    """Matrix-free single layer for a fixed background q0 and frequency."""

    def __init__(self, q0: Potential, zeta, green: FaddeevGreen | None = None, tol: float = 1e-13):
        self.q0 = q0
        self.domain = q0.domain
        grid = self.domain.grid
        self.freq = zeta if isinstance(zeta, ComplexFrequency) else None
        self.zeta = _zeta_of(zeta, grid.h)
        self.green = green or FaddeevGreen(grid, self.zeta, "lattice")
        self.tol = tol
        mesh = self.domain.mesh
        phase = mesh.centroids @ self.zeta
        self.e_plus = np.exp(phase)
        self.e_minus = np.exp(-phase)
        self.src_scale = mesh.weights / grid.cell_volume
        self.supp = np.flatnonzero(q0.values)
        self._qs = q0.values[self.supp]
        self._x0 = None
        self._reflected = None

    # -- volume solve ----------------------------------------------------
    def _resolvent(self, g) -> np.ndarray:
        """(L~ + q0)^{-1} g on the full grid."""
        grid = self.domain.grid
        Gg = self.green.apply(g)
        if self.supp.size == 0:
            return Gg
        supp, qs = self.supp, self._qs
        buf = np.zeros(grid.size, dtype=complex)

        def matvec(x):
            buf[:] = 0
            buf[supp] = x
            return x + qs * self.green.apply(buf).reshape(-1)[supp]

        op = spla.LinearOperator((supp.size, supp.size), matvec=matvec, dtype=complex)
        rhs = qs * Gg.reshape(-1)[supp]
        u, info = spla.gmres(op, rhs, rtol=self.tol, atol=0.0, restart=60, maxiter=40)
        if info != 0:
            raise CgoError("single-layer volume correction did not converge")
        buf[:] = 0
        buf[supp] = u
        return Gg - self.green.apply(buf)

    def _source(self, phi) -> np.ndarray:
        grid, mesh = self.domain.grid, self.domain.mesh
        g = np.zeros(grid.size, dtype=complex)
        g[mesh.nodes] = self.e_minus * self.src_scale * np.asarray(phi)
        return g.reshape(grid.shape)

    def field(self, phi) -> np.ndarray:
        """Single-layer field on the whole unit cell (meaningful away from the seam)."""
        grid = self.domain.grid
        X, Y, Z = grid.mesh()
        z = self.zeta
        return np.exp(z[0] * X + z[1] * Y + z[2] * Z) * self._resolvent(self._source(phi))

    def apply(self, phi) -> np.ndarray:
        v = self._resolvent(self._source(phi)).reshape(-1)[self.domain.mesh.nodes]
        return self.e_plus * v

    @property
    def reflected(self) -> "SingleLayer":
        if self._reflected is None:
            self._reflected = SingleLayer(self.q0, -self.zeta, tol=self.tol)
        return self._reflected

    def apply_transpose(self, phi) -> np.ndarray:
        """S^T = W S_{-zeta} W^{-1} (bilinear transpose)."""
        w = self.domain.mesh.weights
        return w * self.reflected.apply(np.asarray(phi) / w)

    # -- dense assembly ----------------------------------------------------
    def matrix(self) -> np.ndarray:
        mesh = self.domain.mesh
        nodes = mesh.nodes
        if self.supp.size <= DENSE_SUPPORT_LIMIT:
            M = self.green.block(nodes, nodes)
            if self.supp.size:
                G_bs = self.green.block(nodes, self.supp)
                G_sb = self.green.block(self.supp, nodes)
                G_ss = self.green.block(self.supp, self.supp)
                K = np.eye(self.supp.size) + G_ss * self._qs[None, :]
                M -= (G_bs * self._qs[None, :]) @ np.linalg.solve(K, G_sb)
            return (self.e_plus[:, None] * M) * (self.e_minus * self.src_scale)[None, :]
        out = np.empty((mesh.n, mesh.n), dtype=complex)
        e = np.zeros(mesh.n)
        for p in range(mesh.n):
            e[p] = 1.0
            out[:, p] = self.apply(e)
            e[p] = 0.0
        return out


@dataclass
class SingleLayerOp:
    matrix: np.ndarray
    domain: object
    zeta: np.ndarray
    potential: str = ""
    freq: dict = field(default_factory=dict)
    condition: float = float("nan")
    norm: float = float("nan")
    flag: str = "single_layer"

    def apply(self, phi):
        return self.matrix @ np.asarray(phi)

    def save(self, path, dtype: str = "<c8") -> None:
        head = {"potential": self.potential, "freq": self.freq, "condition": self.condition,
                "norm": self.norm, "flag": self.flag, "domain_hash": self.domain.hash,
                "panels": self.domain.mesh.n}
        write_container(path, "single_layer", head,
                        [("matrix", self.matrix.astype(dtype)), ("zeta", np.asarray(self.zeta, dtype=complex))])

    @classmethod
    def load(cls, path, domain) -> "SingleLayerOp":
        head, arr = read_container(path, "single_layer")
        if head["domain_hash"] != domain.hash or head["panels"] != domain.mesh.n:
            raise ContainerError(f"{path}: single layer belongs to another grid or domain")
        return cls(arr["matrix"], domain, arr["zeta"], head["potential"], head["freq"],
                   float(head["condition"]), float(head["norm"]), head["flag"])


def single_layer_apply(q0: Potential, zeta, phi) -> BoundaryFunction:
    if isinstance(phi, BoundaryFunction):
        phi = phi.values
    return BoundaryFunction(SingleLayer(q0, zeta).apply(phi), q0.domain.mesh, tag="trace")


def single_layer_field(q0: Potential, zeta, phi) -> np.ndarray:
    if isinstance(phi, BoundaryFunction):
        phi = phi.values
    return SingleLayer(q0, zeta).field(phi)


def single_layer_matrix(q0: Potential, zeta) -> SingleLayerOp:
    op = SingleLayer(q0, zeta)
    M = op.matrix()
    mesh = q0.domain.mesh
    sv = scipy.linalg.svdvals(M)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    Mt = mesh.norm_transform(0.5) @ M @ mesh.norm_transform_inverse(-0.5)
    norm = float(scipy.linalg.svdvals(Mt)[0])
    freq = op.freq.describe() if op.freq is not None else {}
    return SingleLayerOp(M, q0.domain, op.zeta, q0.provenance, freq, cond, norm)


def invert_single_layer(S: SingleLayerOp, cutoff: float = 1e-12, cond_cap: float = 1e8):
    """Truncated-SVD inverse; returns (inverse matrix, report dict)."""
    U, s, Vh = scipy.linalg.svd(S.matrix)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > cond_cap:
        tail = ", ".join(f"{v:.3e}" for v in s[-5:])
        raise SingleLayerError(f"ill-conditioned single layer: condition {cond:.3e} > cap {cond_cap:.1e}; "
                               f"smallest singular values {tail}")
    keep = s > cutoff * s[0]
    inv = (Vh[keep].conj().T / s[keep]) @ U[:, keep].conj().T
    return inv, {"condition": float(cond), "inverse_norm": float(1.0 / s[keep][-1]), "rank": int(keep.sum())}


def jump_diagnostic(q0: Potential, zeta, phi) -> BoundaryFunction:
    """Interior minus exterior one-sided normal derivative of the single-layer field."""
    if isinstance(phi, BoundaryFunction):
        phi = phi.values
    d = q0.domain
    g, mesh = d.grid, d.mesh
    u = SingleLayer(q0, zeta).field(phi).reshape(-1)
    node = mesh.nodes[mesh.link_panel]
    ijk = np.stack(np.unravel_index(node, g.shape), axis=-1) + mesh.link_dir
    outer = np.ravel_multi_index(tuple(ijk.T), g.shape)
    jump = 2.0 * u[node] - u[mesh.link_inner] - u[outer]
    total = np.bincount(mesh.link_panel, weights=jump.real, minlength=mesh.n) \
        + 1j * np.bincount(mesh.link_panel, weights=jump.imag, minlength=mesh.n)
    return BoundaryFunction(g.h * total / mesh.weights, mesh, tag="density")
