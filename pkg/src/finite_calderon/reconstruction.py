"""Fixed-point reconstruction of a potential from the synthesized boundary data.

    A(q) = P_{W_R}( q + F^{-1} P_N ( T(q) - F q - B(q) ) )

F is the grid Fourier transform with cell-centre phases (an isometry onto the full
lattice), B the CGO perturbation term and T the data functional built from the
measured DN map and the Neumann-series data.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .cgo import FaddeevGreen, FrequencySchedule, solve_cgo
from .containers import read_container, write_container
from .errors import CalderonError, ProjectionError
from .forward import DtNMap, Potential, boundary_flux
from .grid import Domain, TorusGrid, boundary_pairing
from .layers import SingleLayer
from .synthesis import MeasurementSet, NeumannOperator

__all__ = [
    "SubspaceW",
    "ProjectionCertificate",
    "cube_order",
    "fourier_full",
    "fourier_coeffs",
    "inverse_fourier",
    "project_WR",
    "choose_N",
    "projection_constant",
    "b_perturbation",
    "ReconstructionContext",
    "t_data",
    "apply_A",
    "iterate",
    "ReconstructionResult",
]


# ---------------------------------------------------------------------------
# Fourier analysis


def cube_order(m: int) -> np.ndarray:
    """All wavenumbers of the m-point grid, sorted by (|k|^2, lexicographic)."""
    kk = np.fft.fftfreq(m, d=1.0 / m).round().astype(np.int64)
    K = np.stack(np.meshgrid(kk, kk, kk, indexing="ij"), axis=-1).reshape(-1, 3)
    return K[np.lexsort((K[:, 2], K[:, 1], K[:, 0], (K**2).sum(axis=1)))]


def _phase(ks, m, sign):
    return np.exp(sign * 1j * np.pi * np.asarray(ks).sum(axis=-1) / m)


def fourier_full(q, grid: TorusGrid) -> np.ndarray:
    """(Fq)_k for every grid wavenumber, array in FFT index order."""
    q = np.asarray(q).reshape(grid.shape)
    m = grid.m
    kk = np.fft.fftfreq(m, d=1.0 / m)
    ph = np.exp(-1j * np.pi * kk / m)
    return grid.cell_volume * sfft.fftn(q) * (ph[:, None, None] * ph[None, :, None] * ph[None, None, :])


def fourier_coeffs(q, ks, grid: TorusGrid | None = None) -> np.ndarray:
    """(Fq)_n = sum_x h^3 q(x) exp(-2 pi i k_n . x) for the listed wavenumbers."""
    q = np.asarray(q)
    if grid is None:
        grid = TorusGrid(round(q.size ** (1 / 3)))
    ks = np.asarray(ks, dtype=np.int64).reshape(-1, 3)
    full = sfft.fftn(q.reshape(grid.shape))
    idx = np.mod(ks, grid.m)
    return grid.cell_volume * full[idx[:, 0], idx[:, 1], idx[:, 2]] * _phase(ks, grid.m, -1)


def inverse_fourier(coeffs, ks, grid: TorusGrid) -> np.ndarray:
    """sum_n c_n exp(2 pi i k_n . x) on the grid (wavenumbers must be distinct mod m)."""
    ks = np.asarray(ks, dtype=np.int64).reshape(-1, 3)
    idx = np.mod(ks, grid.m)
    A = np.zeros(grid.shape, dtype=complex)
    np.add.at(A, (idx[:, 0], idx[:, 1], idx[:, 2]), np.asarray(coeffs) * _phase(ks, grid.m, 1))
    return sfft.ifftn(A) * grid.size


# ---------------------------------------------------------------------------
# Subspace W and the convex projection


@dataclass
class ProjectionCertificate:
    active: bool
    iterations: int
    kkt_residual: float


class SubspaceW:
    """Orthonormal (in sum_x h^3 a b) basis supported in the domain, with sup bound R."""

    def __init__(self, domain: Domain, basis, R: float, kind: str, params: dict | None = None, labels=None):
        self.domain = domain
        self.basis = np.asarray(basis, dtype=float)  # (dim, interior cells)
        self.R = float(R)
        self.kind = kind
        self.params = dict(params or {})
        self.labels = labels
        self.N = None
        self.pn_norm = None
        gram = domain.grid.cell_volume * self.basis @ self.basis.T
        self.gram_defect = float(np.abs(gram - np.eye(self.dim)).max())
        if self.gram_defect > 1e-12:
            raise ValueError(f"basis is not orthonormal (Gram defect {self.gram_defect:.2e})")

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def partition(cls, domain: Domain, s: int, R: float):
        """Indicators of an s x s x s split of the interior cells, normalized."""
        g = domain.grid
        ijk = np.stack(np.unravel_index(domain.interior, g.shape), axis=-1)
        label = np.zeros(domain.n_interior, dtype=np.int64)
        for ax in range(3):
            axis_vals = np.unique(ijk[:, ax])
            if axis_vals.size < s:
                raise ValueError(f"cannot split {axis_vals.size} cells into {s} parts")
            part = np.empty(axis_vals.max() + 1, dtype=np.int64)
            for p, chunk in enumerate(np.array_split(axis_vals, s)):
                part[chunk] = p
            label = label * s + part[ijk[:, ax]]
        dim = s**3
        basis = np.zeros((dim, domain.n_interior))
        counts = np.bincount(label, minlength=dim)
        if np.any(counts == 0):
            raise ValueError("empty partition cell")
        basis[label, np.arange(domain.n_interior)] = 1.0 / np.sqrt(counts[label] * g.cell_volume)
        return cls(domain, basis, R, "partition", {"s": s}, labels=label)

    @classmethod
    def prolate(cls, domain: Domain, R: float, band: int = 2, order: int = 2):
        """Tensor products of 1-D discrete prolate sequences of a box.

        The 1-D factors are the leading right singular vectors of the Fourier
        matrix restricted to the box's cells, for wavenumbers |kappa| <= band.
        """
        if domain.spec.kind != "box":
            raise ValueError("prolate subspace needs a box domain")
        g = domain.grid
        inside = (g.coords > domain.spec.lo) & (g.coords < domain.spec.hi)
        x = g.coords[inside]
        kap = np.arange(-band, band + 1)
        E = np.exp(-2j * np.pi * np.outer(kap, x))
        _, sv, Vt = np.linalg.svd(np.vstack([E.real, E.imag]), full_matrices=False)
        if order > sv.size:
            raise ValueError("order exceeds the band dimension")
        P = Vt[:order] / np.sqrt(g.h)
        w = 1.0 + 0.5 * (x - x.mean()) / (x.max() - x.min())
        P *= np.sign(P @ w)[:, None]
        ijk = np.stack(np.unravel_index(domain.interior, g.shape), axis=-1)
        loc = np.cumsum(inside) - 1
        li = loc[ijk]
        basis = np.array([P[a][li[:, 0]] * P[b][li[:, 1]] * P[c][li[:, 2]]
                          for a in range(order) for b in range(order) for c in range(order)])
        return cls(domain, basis, R, "prolate", {"band": band, "order": order})

    def coeffs(self, v) -> np.ndarray:
        v = np.asarray(v).reshape(-1)
        vi = v[self.domain.interior] if v.size == self.domain.grid.size else v
        return self.domain.grid.cell_volume * (self.basis @ vi)

    def synth(self, c) -> np.ndarray:
        out = np.zeros(self.domain.grid.size)
        out[self.domain.interior] = np.asarray(c) @ self.basis
        return out

    def project(self, v) -> np.ndarray:
        return self.synth(self.coeffs(np.real(v)))

    def sup(self, c) -> float:
        return float(np.max(np.abs(np.asarray(c) @ self.basis)))

    def potential(self, c, provenance="W element") -> Potential:
        return Potential(self.domain, np.asarray(c) @ self.basis, R=max(self.R, self.sup(c)), provenance=provenance)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "R": self.R, **self.params,
                "N": self.N, "pn_norm": self.pn_norm}


def _project_coeffs(c0, W: SubspaceW, tol: float, max_iter: int):
    R = W.R
    Phi = W.basis.T  # values at interior cells
    vals = Phi @ c0
    if np.max(np.abs(vals)) <= R:
        return c0.copy(), ProjectionCertificate(False, 0, 0.0)
    if W.kind == "partition":
        # cell value = c_i * basis height; clamp each cell independently
        height = np.array([np.max(W.basis[i]) for i in range(W.dim)])
        c = np.clip(c0 * height, -R, R) / height
        return c, ProjectionCertificate(True, 1, 0.0)
    # dual proximal gradient (FISTA) for min 1/2|c - c0|^2 s.t. |Phi c| <= R
    tau = W.domain.grid.cell_volume  # 1 / ||Phi Phi^T||
    nu = np.zeros(Phi.shape[0])
    y, tk = nu.copy(), 1.0
    target = Phi @ c0
    kkt = np.inf
    for it in range(1, max_iter + 1):
        grad = Phi @ (Phi.T @ y) - target
        z = y - tau * grad
        nu_new = np.sign(z) * np.maximum(np.abs(z) - tau * R, 0.0)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        if np.dot(nu_new - nu, y - nu_new) > 0:  # restart
            t_new, y = 1.0, nu_new.copy()
        else:
            y = nu_new + ((tk - 1) / t_new) * (nu_new - nu)
        nu, tk = nu_new, t_new
        if it % 25 == 0 or it == max_iter:
            c = c0 - Phi.T @ nu
            v = Phi @ c
            viol = np.max(np.maximum(np.abs(v) - R, 0.0))
            act = nu != 0
            comp = np.max(np.abs(v[act] - R * np.sign(nu[act]))) if act.any() else 0.0
            kkt = max(viol, comp) / R
            if kkt <= tol:
                return c, ProjectionCertificate(True, it, float(kkt))
    raise ProjectionError(f"projection onto W_R stalled with KKT residual {kkt:.3e}")


def project_WR(v, W: SubspaceW, tol: float = 1e-10, max_iter: int = 200000):
    """L2 projection onto {w in W : ||w||_inf <= R}; returns (grid values, coeffs, certificate)."""
    c0 = W.coeffs(np.real(v))
    c, cert = _project_coeffs(c0, W, tol, max_iter)
    return W.synth(c), c, cert


def projection_constant(W: SubspaceW, cap: int | None = None) -> np.ndarray:
    """||P_N^perp F P_W|| for N = 1..cap over the full grid lattice in schedule order."""
    grid = W.domain.grid
    order = cube_order(grid.m)
    cap = len(order) if cap is None else min(cap, len(order))
    idx = np.mod(order[:cap], grid.m)
    C = np.empty((cap, W.dim), dtype=complex)
    for i in range(W.dim):
        full = fourier_full(W.synth(np.eye(W.dim)[i]), grid)
        C[:, i] = full[idx[:, 0], idx[:, 1], idx[:, 2]]
    G = np.eye(W.dim, dtype=complex)
    out = np.empty(cap)
    for n in range(cap):
        G -= np.outer(C[n].conj(), C[n])
        out[n] = np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0))
    return out


def choose_N(W: SubspaceW, cap: int | None = None, threshold: float = 0.25):
    """Smallest N with ||P_N^perp F P_W|| <= threshold; stores N and the norm on W."""
    curve = projection_constant(W, cap)
    hit = np.nonzero(curve <= threshold)[0]
    if hit.size == 0:
        raise CalderonError(f"no N up to {curve.size} reaches {threshold}; best norm {curve.min():.4f}")
    N = int(hit[0]) + 1
    W.N, W.pn_norm = N, float(curve[N - 1])
    return N, W.pn_norm


# ---------------------------------------------------------------------------
# Perturbation B and data functional T


def _zeta_pair(freq, h):
    return freq.lattice(h)


def _volume_B(q: Potential, k, sol) -> complex:
    g = q.domain.grid
    supp = np.flatnonzero(q.values)
    pts = g.points(supp)
    return g.cell_volume * np.sum(q.values[supp] * np.exp(-2j * np.pi * pts @ k) * sol.r.reshape(-1)[supp])


def b_perturbation(q: Potential, sched: FrequencySchedule, N: int, route: str = "volume",
                   dtn_q: DtNMap | None = None, dtn0: DtNMap | None = None, solutions=None) -> np.ndarray:
    """B(q)_n for n = 1..N by the volume integral or by the boundary pairing."""
    d = q.domain
    out = np.zeros(N, dtype=complex)
    if route == "boundary":
        if dtn_q is None or dtn0 is None:
            raise ValueError("boundary route needs the DN maps of q and of zero")
        F = fourier_coeffs(q.values, sched.ks[:N], d.grid)
    for n in range(1, N + 1):
        fr = sched.frequency(n)
        sol = solutions[n - 1] if solutions is not None else solve_cgo(q, fr, d)
        if route == "volume":
            out[n - 1] = _volume_B(q, sched.ks[n - 1], sol)
        elif route == "boundary":
            et = np.exp(d.mesh.centroids @ _zeta_pair(fr, d.grid.h)[1])
            out[n - 1] = boundary_pairing(et, (dtn_q.matrix - dtn0.matrix) @ sol.trace, d.mesh) - F[n - 1]
        else:
            raise ValueError(f"unknown route {route!r}")
    return out


class ReconstructionContext:
    """Everything A needs, precomputed once: frequencies, Green operators, pairings."""

    def __init__(self, W: SubspaceW, sched: FrequencySchedule, q0: Potential, measured: DtNMap,
                 dtn_q0: DtNMap, meas: MeasurementSet, dtn0: DtNMap | None = None, N: int | None = None,
                 cache_greens: bool = True, diff=None):
        self.W = W
        self.domain = W.domain
        self.grid = self.domain.grid
        self.N = N if N is not None else (W.N or meas.N)
        if self.N > meas.N:
            raise ValueError(f"measurement set holds {meas.N} frequencies, {self.N} requested")
        self.sched = sched.head(self.N)
        self.q0, self.measured, self.dtn_q0, self.meas = q0, measured, dtn_q0, meas
        self.L = meas.L
        self.cache_greens = cache_greens
        self.freqs = [self.sched.frequency(n) for n in range(1, self.N + 1)]
        mesh = self.domain.mesh
        h = self.grid.h
        self.e_tilde = [np.exp(mesh.centroids @ f.lattice(h)[1]) for f in self.freqs]
        self._greens = {}
        self._warm = {}
        t0 = time.perf_counter()
        w = mesh.weights
        self.b = []
        for n, et in enumerate(self.e_tilde):
            if dtn0 is not None:
                bn = (measured.matrix - dtn0.matrix).T @ (w * et)
            else:
                # exp(zeta~_h . x) is discrete harmonic, so Lambda_0 of its trace is its flux
                X = self.grid.points(np.arange(self.grid.size))
                flux0 = boundary_flux(np.exp(X @ self.freqs[n].lattice(h)[1]), self.domain)
                bn = measured.matrix.T @ (w * et) - w * flux0
            self.b.append(bn)
        diff = measured.matrix - dtn_q0.matrix if diff is None else diff
        self.c = np.array([self.b[n] @ meas.records[n].fL for n in range(self.N)])
        self.a = []
        for n in range(self.N):
            op = NeumannOperator(SingleLayer(q0, self.freqs[n], green=self.green(n)), diff)
            v = self.b[n]
            for _ in range(self.L + 1):
                v = op.apply_transpose(v)
            self.a.append(v)
        self.setup_seconds = time.perf_counter() - t0

    def green(self, n: int) -> FaddeevGreen:
        g = self._greens.get(n)
        if g is None:
            g = FaddeevGreen(self.grid, self.freqs[n].lattice(self.grid.h)[0], "lattice")
            if self.cache_greens:
                self._greens[n] = g
        return g

    def cgo(self, q: Potential):
        sols = []
        for n, fr in enumerate(self.freqs):
            sol = solve_cgo(q, fr, self.domain, green=self.green(n))
            sols.append(sol)
        return sols

    def T(self, q: Potential, sols=None) -> np.ndarray:
        sols = sols if sols is not None else self.cgo(q)
        return self.c + np.array([self.a[n] @ sols[n].trace for n in range(self.N)])

    def B(self, q: Potential, sols=None) -> np.ndarray:
        sols = sols if sols is not None else self.cgo(q)
        return np.array([_volume_B(q, self.sched.ks[n], sols[n]) for n in range(self.N)])

    def F(self, q) -> np.ndarray:
        v = q.values if isinstance(q, Potential) else q
        return fourier_coeffs(v, self.sched.ks, self.grid)


def t_data(q: Potential, ctx: ReconstructionContext) -> np.ndarray:
    return ctx.T(q)


def _as_potential(q, W: SubspaceW) -> Potential:
    if isinstance(q, Potential):
        return q
    q = np.asarray(q, dtype=float)
    if q.size == W.dim:
        return W.potential(q)
    return Potential(W.domain, q, R=max(W.R, float(np.max(np.abs(q)))), provenance="iterate")


def apply_A(q, ctx: ReconstructionContext, return_parts: bool = False):
    """One application of A; returns (grid values, W coefficients[, parts])."""
    qp = _as_potential(q, ctx.W)
    sols = ctx.cgo(qp)
    Fq = ctx.F(qp)
    T = ctx.T(qp, sols)
    B = ctx.B(qp, sols)
    update = inverse_fourier(T - Fq - B, ctx.sched.ks, ctx.grid).reshape(-1)
    vals, c, cert = project_WR(qp.values + update.real, ctx.W)
    if return_parts:
        return vals, c, {"T": T, "F": Fq, "B": B, "imag": float(np.abs(update.imag).max()), "cert": cert}
    return vals, c


# ---------------------------------------------------------------------------
# Banach iteration


@dataclass
class ReconstructionResult:
    coeffs: np.ndarray  # (M, dim) iterates q^1..q^M in W
    distances: np.ndarray  # ||q^{n+1} - q^n||
    ratios: np.ndarray
    converged: bool
    non_contraction: bool
    W: SubspaceW
    errors: np.ndarray | None = None
    budget: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.W.synth(self.coeffs[-1])

    @property
    def iterations(self) -> int:
        return len(self.coeffs)

    def grid_iterate(self, n: int) -> np.ndarray:
        """Grid realization of q^n (1-based)."""
        return self.W.synth(self.coeffs[n - 1])

    def check_consistency(self) -> float:
        recomputed = np.array([float(np.linalg.norm(self.coeffs[i + 1] - self.coeffs[i]))
                               for i in range(len(self.coeffs) - 1)])
        return float(np.max(np.abs(recomputed - self.distances))) if recomputed.size else 0.0

    def tail_bound_holds(self) -> bool:
        """8 (7/8)^n ||q^2 - q^1|| >= ||q_final - q^n|| for every n."""
        if len(self.coeffs) < 2:
            return True
        d1 = np.linalg.norm(self.coeffs[1] - self.coeffs[0])
        tail = np.linalg.norm(self.coeffs - self.coeffs[-1], axis=1)
        n = np.arange(1, len(self.coeffs) + 1)
        return bool(np.all(tail <= 8.0 * (7.0 / 8.0) ** n * d1 + 1e-15))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "iterations": self.iterations,
            "converged": self.converged,
            "non_contraction": self.non_contraction,
            "W": self.W.describe(),
            "budget": self.budget,
            "final_error": None if self.errors is None else float(self.errors[-1]),
            "domain_hash": self.W.domain.hash,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        # wall-clock numbers live apart from the reproducible artifacts
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True))
        arrays = [("coeffs", self.coeffs), ("distances", self.distances), ("ratios", self.ratios),
                  ("final", self.final)]
        if self.errors is not None:
            arrays.append(("errors", self.errors))
        write_container(out / "iterates.bin", "iterates", {"dim": self.W.dim, "domain_hash": self.W.domain.hash},
                        arrays)
        with open(out / "iterations.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["n", "distance", "ratio", "error"])
            for i in range(self.iterations):
                dist = self.distances[i - 1] if i >= 1 else ""
                ratio = self.ratios[i - 2] if i >= 2 else ""
                err = self.errors[i] if self.errors is not None else ""
                wr.writerow([i + 1, dist, ratio, err])

    @staticmethod
    def load_arrays(out_dir):
        return read_container(Path(out_dir) / "iterates.bin", "iterates")


def iterate(q1, ctx: ReconstructionContext, max_iters: int = 200, tol: float = 1e-9, truth=None,
            callback=None) -> ReconstructionResult:
    """Banach iteration q^{n+1} = A(q^n) from q^1 (coefficients in W or a grid function in W_R)."""
    W = ctx.W
    c = np.asarray(q1, dtype=float)
    if c.size != W.dim:
        c = W.coeffs(c)
    if W.sup(c) > W.R * (1 + 1e-12):
        raise ValueError("initial guess is not in W_R")
    coeffs = [c]
    dists, ratios = [], []
    bad_run, non_contraction, converged = 0, False, False
    t0 = time.perf_counter()
    for _ in range(max_iters - 1):
        _, c = apply_A(coeffs[-1], ctx)
        coeffs.append(c)
        dists.append(float(np.linalg.norm(coeffs[-1] - coeffs[-2])))
        if len(dists) >= 2:
            r = dists[-1] / dists[-2] if dists[-2] > 0 else 0.0
            ratios.append(r)
            bad_run = bad_run + 1 if r >= 1.0 else 0
            if bad_run >= 3:
                non_contraction = True
                break
        if callback is not None:
            callback(len(coeffs), dists[-1])
        if dists[-1] <= tol:
            converged = True
            break
    coeffs = np.array(coeffs)
    errors = None
    if truth is not None:
        tv = truth.values if isinstance(truth, Potential) else np.asarray(truth).reshape(-1)
        h3 = ctx.grid.cell_volume
        errors = np.array([np.sqrt(h3 * np.sum((W.synth(ci) - tv) ** 2)) for ci in coeffs])
    return ReconstructionResult(coeffs, np.array(dists), np.array(ratios), converged, non_contraction, W,
                                errors, timings={"iterate_seconds": time.perf_counter() - t0,
                                                 "setup_seconds": ctx.setup_seconds})
