"""Noisy measurements and the Neumann-series boundary data f^L_n.

With the Green function convention used throughout, the discrete boundary
integral equation reads  f_q = f_q0 - S^{q0}(Lambda_q - Lambda_q0) f_q,
so the Neumann operator is K_n = -S^{q0}_{zeta_n} (Lambda^eta - Lambda_q0) and
f^L_n = sum_{l=0}^{L} K_n^l f^n_q0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .cgo import FrequencySchedule, solve_cgo
from .containers import read_container, write_container
from .errors import ContractionError, ContainerError
from .forward import DtNMap, Potential, op_norm_star
from .grid import sobolev_norm
from .layers import SingleLayer

__all__ = [
    "measure",
    "measure_noise_free",
    "NeumannOperator",
    "MeasurementRecord",
    "MeasurementSet",
    "synthesize_fL",
    "contraction_report",
    "operator_norm_half",
]


def measure(dtn_true: DtNMap, E: DtNMap) -> DtNMap:
    if dtn_true.matrix.shape != E.matrix.shape:
        raise ValueError(f"shape mismatch {dtn_true.matrix.shape} vs {E.matrix.shape}")
    eta = op_norm_star(E)
    meta = dict(dtn_true.meta)
    meta.update({"noise_seed": E.meta.get("seed"), "eta": eta})
    return DtNMap(dtn_true.matrix + E.matrix, dtn_true.domain, flag="measured", eta=eta, meta=meta)


def measure_noise_free(dtn_true: DtNMap, seed: int = 0) -> DtNMap:
    """The eta = 0 measurement without allocating a zero noise matrix."""
    meta = dict(dtn_true.meta)
    meta.update({"noise_seed": int(seed), "eta": 0.0})
    return DtNMap(dtn_true.matrix, dtn_true.domain, flag="measured", eta=0.0, meta=meta)


class NeumannOperator:
    """K = -S^{q0}_zeta (Lambda^eta - Lambda_q0) and its bilinear transpose."""

    def __init__(self, layer: SingleLayer, diff: np.ndarray):
        self.layer = layer
        self.diff = diff

    def apply(self, f):
        return -self.layer.apply(self.diff @ f)

    def apply_transpose(self, g):
        return -(self.diff.T @ self.layer.apply_transpose(g))

    def apply_adjoint(self, g):
        return np.conj(self.apply_transpose(np.conj(g)))


def operator_norm_half(op, mesh, tol: float = 1e-8) -> float:
    """H^{1/2} -> H^{1/2} norm of a boundary operator given matrix-free."""
    T = mesh.norm_transform(0.5)
    Ti = mesh.norm_transform_inverse(0.5)
    n = mesh.n
    if not np.any(op.diff):
        return 0.0
    lin = spla.LinearOperator(
        (n, n),
        matvec=lambda x: T @ op.apply(Ti @ np.ravel(x)),
        rmatvec=lambda y: Ti.T @ op.apply_adjoint(T.T @ np.ravel(y)),
        dtype=complex,
    )
    v0 = np.ones(n, dtype=complex) / np.sqrt(n)
    s = spla.svds(lin, k=1, tol=tol, v0=v0, return_singular_vectors=False, solver="arpack")
    return float(s[0])


@dataclass
class MeasurementRecord:
    n: int
    k: np.ndarray
    t: float
    iterates: np.ndarray  # (L+1, panels); row l is K^l f^n_q0

    @property
    def f_q0(self):
        return self.iterates[0]

    @property
    def fL(self):
        """Sum over l = 0..L."""
        return self.iterates.sum(axis=0)

    @property
    def tail(self):
        """Sum over l = 1..L."""
        return self.iterates[1:].sum(axis=0)


@dataclass
class MeasurementSet:
    records: list
    L: int
    eta: float
    domain: object
    manifest: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.records)

    def fL(self, n: int):
        return self.records[n - 1].fL

    def decay_ratios(self) -> np.ndarray:
        """(N, L) array of ||K^{l+1} f|| / ||K^l f|| in H^{1/2}."""
        mesh = self.domain.mesh
        T = mesh.norm_transform(0.5)
        out = np.zeros((self.N, self.L))
        for i, rec in enumerate(self.records):
            norms = np.linalg.norm(rec.iterates @ T.T, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[i] = np.where(norms[:-1] > 0, norms[1:] / norms[:-1], 0.0)
        return out

    def save(self, path) -> None:
        head = dict(self.manifest)
        head.update({"N": self.N, "L": self.L, "eta": self.eta, "m": self.domain.grid.m,
                     "domain_hash": self.domain.hash, "panels": self.domain.mesh.n})
        ks = np.array([r.k for r in self.records], dtype=np.int64).reshape(-1, 3)
        ts = np.array([r.t for r in self.records], dtype=float)
        its = np.stack([r.iterates for r in self.records]).astype(complex)
        fl = np.stack([r.fL for r in self.records]).astype(complex)
        write_container(path, "measurement", head, [("k", ks), ("t", ts), ("iterates", its), ("fL", fl)])

    @classmethod
    def load(cls, path, domain):
        head, arr = read_container(path, "measurement")
        if head["domain_hash"] != domain.hash or head["panels"] != domain.mesh.n:
            raise ContainerError(f"{path}: measurement set belongs to another grid or domain")
        recs = [MeasurementRecord(i + 1, arr["k"][i], float(arr["t"][i]), arr["iterates"][i])
                for i in range(head["N"])]
        ms = cls(recs, int(head["L"]), float(head["eta"]), domain,
                 {k: v for k, v in head.items() if k not in ("arrays",)})
        if not np.array_equal(np.stack([r.fL for r in recs]), arr["fL"]):
            raise ContainerError(f"{path}: stored f^L does not match the sum of iterates")
        return ms


def _iterate_series(op: NeumannOperator, f0, mesh, L: int | None, tol: float, L_max: int, ratio_cap: float):
    its = [f0]
    T = mesh.norm_transform(0.5)
    norms = [np.linalg.norm(T @ f0)]
    total = norms[0]
    worst = 0.0
    while True:
        l = len(its) - 1
        if L is not None and l >= L:
            break
        if L is None:
            rho = max(worst, 1e-3)
            if norms[-1] <= tol * (1.0 - min(rho, 0.99)) * total or l >= L_max:
                break
        nxt = op.apply(its[-1])
        its.append(nxt)
        norms.append(np.linalg.norm(T @ nxt))
        if norms[-2] > 0:
            worst = max(worst, norms[-1] / norms[-2])
            if worst > ratio_cap:
                raise ContractionError("Neumann series iterate growth above cap", worst)
        total = np.linalg.norm(T @ np.sum(its, axis=0))
    return its


def synthesize_fL(measured: DtNMap, q0: Potential, dtn_q0: DtNMap, sched: FrequencySchedule, N: int,
                  L: int | None = None, tol: float = 1e-6, L_max: int = 80, ratio_cap: float = 0.75,
                  manifest: dict | None = None, diff=None) -> MeasurementSet:
    """Build f^L_n for n = 1..N.  With L=None the smallest common L meeting ``tol`` is used."""
    domain = q0.domain
    mesh = domain.mesh
    diff = measured.matrix - dtn_q0.matrix if diff is None else diff
    series = []
    for n in range(1, N + 1):
        fr = sched.frequency(n)
        layer = SingleLayer(q0, fr)
        op = NeumannOperator(layer, diff)
        f0 = solve_cgo(q0, fr, domain, green=layer.green).trace
        series.append((fr, op, _iterate_series(op, f0, mesh, L, tol, L_max, ratio_cap)))
    L_common = L if L is not None else max(len(s[2]) - 1 for s in series)
    records = []
    for n, (fr, op, its) in enumerate(series, start=1):
        while len(its) < L_common + 1:
            its.append(op.apply(its[-1]))
        records.append(MeasurementRecord(n, np.asarray(fr.k), fr.t, np.array(its[:L_common + 1])))
    man = {"c": sched.c, "q0": q0.provenance, "measured_eta": measured.eta,
           "noise_seed": measured.meta.get("noise_seed")}
    man.update(manifest or {})
    return MeasurementSet(records, L_common, float(measured.eta), domain, man)


def contraction_report(q0: Potential, sched: FrequencySchedule, measured: DtNMap, dtn_q0: DtNMap,
                       N: int | None = None) -> np.ndarray:
    """Per-n H^{1/2} -> H^{1/2} norm of S^{q0}_{zeta_n} (Lambda^eta - Lambda_q0)."""
    N = len(sched) if N is None else N
    diff = measured.matrix - dtn_q0.matrix
    mesh = q0.domain.mesh
    out = np.zeros(N)
    if not np.any(diff):
        return out
    for n in range(1, N + 1):
        op = NeumannOperator(SingleLayer(q0, sched.frequency(n)), diff)
        out[n - 1] = operator_norm_half(op, mesh)
    return out


def truncation_bound(ratio: float, L: int, f0_norm: float) -> float:
    return ratio ** (L + 1) / (1.0 - ratio) * f0_norm


def half_norm(f, mesh) -> float:
    return sobolev_norm(f, 0.5, mesh)
