"""Frequency schedule, complex frequencies, Faddeev-type Green operators and CGO solutions.

Conventions.  A CGO solution is psi = exp(zeta . x) (1 + r).  Conjugating -Delta by
the exponential gives the operator -Delta - 2 zeta . grad, whose Fourier symbol in
the variable zeta' = -i zeta reads  theta . theta + 2 zeta' . theta.  Green operators
act on functions that are antiperiodic on the unit cell, i.e. on the half-offset
wavenumber lattice theta = 2 pi (kappa + 1/2), where the symbol has no real zeros
for the frequencies used here.

Two symbol kinds are provided.  ``spectral`` is the continuum symbol above.
``lattice`` is the symbol of the conjugated 7-point Laplacian,
    sum_j (4 / h^2) sin^2((theta_j + zeta'_j) h / 2),
which is what the discrete pipeline needs for exact identities.  Used with the
lattice-harmonic frequency pair from :func:`lattice_pair`, exp(zeta_h . x) is
exactly discrete-harmonic and zeta_h + zeta~_h = -2 pi i k still holds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft
import scipy.sparse.linalg as spla

from .errors import CgoError, FrequencyError, ResonantFrequencyError
from .grid import TorusGrid

__all__ = [
    "FrequencySchedule",
    "ComplexFrequency",
    "CgoSolution",
    "FaddeevGreen",
    "order_frequencies",
    "tangent_frame",
    "make_zeta",
    "lattice_pair",
    "faddeev_convolve",
    "solve_cgo",
    "cgo_contraction",
    "calibrate_t",
]


def _enumerate_ball(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    K = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    K = K[(K**2).sum(axis=1) <= radius**2]
    order = np.lexsort((K[:, 2], K[:, 1], K[:, 0], (K**2).sum(axis=1)))
    return K[order]


@dataclass(frozen=True)
class FrequencySchedule:
    ks: np.ndarray
    c: float = 1.0
    c1: float = 0.0

    def __post_init__(self):
        if self.c < self.c1:
            raise FrequencyError(f"schedule constant c = {self.c} is below c1 = {self.c1}")

    def __len__(self):
        return len(self.ks)

    @cached_property
    def norms(self) -> np.ndarray:
        return np.sqrt((self.ks**2).sum(axis=1))

    @cached_property
    def t(self) -> np.ndarray:
        return self.c * (self.norms**3 + 1.0)

    @cached_property
    def c_rho(self) -> float:
        n = np.arange(1, len(self.ks) + 1)
        return float(np.max(self.norms / n ** (1.0 / 3.0)))

    def frequency(self, n: int) -> "ComplexFrequency":
        """The n-th complex frequency, 1-based as in the ordering."""
        return make_zeta(self.ks[n - 1], self.t[n - 1], self.c1)

    def head(self, N: int) -> "FrequencySchedule":
        return FrequencySchedule(self.ks[:N], self.c, self.c1)

    def with_c(self, c: float) -> "FrequencySchedule":
        return FrequencySchedule(self.ks, c, self.c1)


def order_frequencies(count: int, c: float = 1.0, c1: float = 0.0) -> FrequencySchedule:
    """First ``count`` lattice points of Z^3 sorted by (|k|^2, lexicographic)."""
    if count < 1:
        raise ValueError("need at least one frequency")
    radius = 1
    while True:
        K = _enumerate_ball(radius)
        # every point of the radius-(radius) ball precedes anything outside it
        if len(K) >= count:
            return FrequencySchedule(K[:count].copy(), c, c1)
        radius += 1


def tangent_frame(k):
    k = np.asarray(k, dtype=float)
    if not np.any(k):
        return np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        c = np.cross(e, k)
        if np.linalg.norm(c) > 1e-12 * np.linalg.norm(k):
            xi = c / np.linalg.norm(c)
            eta = np.cross(k, xi)
            return xi, eta / np.linalg.norm(eta)
    raise AssertionError("unreachable")  # pragma: no cover


@dataclass(frozen=True)
class ComplexFrequency:
    k: np.ndarray
    t: float
    xi: np.ndarray
    eta_vec: np.ndarray
    zeta: np.ndarray
    zeta_tilde: np.ndarray
    _lattice: dict = field(default_factory=dict, repr=False, compare=False)

    def lattice(self, h: float):
        """Lattice-harmonic pair (zeta_h, zeta~_h) for spacing h, cached."""
        key = float(h)
        if key not in self._lattice:
            self._lattice[key] = lattice_pair(self, h)
        return self._lattice[key]

    def describe(self) -> dict:
        return {"k": [int(v) for v in self.k], "t": float(self.t)}


def make_zeta(k, t: float, c1: float = 0.0) -> ComplexFrequency:
    if t < c1:
        raise FrequencyError(f"t = {t} is below the configured minimum c1 = {c1}")
    k = np.asarray(k, dtype=np.int64)
    xi, eta = tangent_frame(k)
    kf = k.astype(float)
    s = np.sqrt(t**2 + np.pi**2 * kf @ kf)
    zeta = -1j * (np.pi * kf + t * xi) + s * eta
    zeta_t = -1j * (np.pi * kf - t * xi) - s * eta
    return ComplexFrequency(k, float(t), xi, eta, zeta, zeta_t)


def lattice_pair(freq: ComplexFrequency, h: float, tol: float = 1e-15, max_iter: int = 60):
    """Solve sum_j cosh(z_j h) = 3 for z = -i pi k + w and z = -i pi k - w.

    Minimum-norm Newton from the continuum w0 = zeta + i pi k.  Both members of the
    pair then give exactly discrete-harmonic exponentials and their sum is -2 pi i k.
    """
    a = -1j * np.pi * freq.k.astype(float)
    w = freq.zeta - a
    for _ in range(max_iter):
        zp, zm = (a + w) * h, (a - w) * h
        F = np.array([np.cosh(zp).sum() - 3.0, np.cosh(zm).sum() - 3.0])
        if np.max(np.abs(F)) < tol * 3.0:
            break
        J = np.vstack([h * np.sinh(zp), -h * np.sinh(zm)])
        w = w - np.linalg.lstsq(J, F, rcond=None)[0]
    else:
        raise CgoError(f"lattice frequency for k={freq.k.tolist()} did not converge")
    return a + w, a - w


def _offset_theta(m: int) -> np.ndarray:
    kappa = np.fft.fftfreq(m, d=1.0 / m)
    return 2.0 * np.pi * (kappa + 0.5)


class FaddeevGreen:
    """Inverse of the conjugated Laplacian on antiperiodic grid functions."""

    def __init__(self, grid: TorusGrid, zeta, kind: str = "lattice", resonance_tol: float = 1e-10):
        self.grid = grid
        self.zeta = np.asarray(zeta, dtype=complex)
        self.kind = kind
        zp = -1j * self.zeta
        th = _offset_theta(grid.m)
        h = grid.h
        parts = []
        for j in range(3):
            if kind == "lattice":
                parts.append((4.0 / h**2) * np.sin((th + zp[j]) * h / 2.0) ** 2)
            elif kind == "spectral":
                parts.append(th**2 + 2.0 * zp[j] * th)
            else:
                raise ValueError(f"unknown symbol kind {kind!r}")
        sym = parts[0][:, None, None] + parts[1][None, :, None] + parts[2][None, None, :]
        mag = np.abs(sym)
        i = np.unravel_index(np.argmin(mag), mag.shape)
        if mag[i] < resonance_tol * mag.max():
            kap = np.fft.fftfreq(grid.m, d=1.0 / grid.m)
            raise ResonantFrequencyError([kap[a] + 0.5 for a in i], mag[i])
        self.symbol = sym
        self.inverse_symbol = 1.0 / sym
        j = np.arange(grid.m)
        ph = np.exp(1j * np.pi * j / grid.m)
        self.twist = ph[:, None, None] * ph[None, :, None] * ph[None, None, :]

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v).reshape(self.grid.shape)
        w = sfft.fftn(np.conj(self.twist) * v)
        return self.twist * sfft.ifftn(w * self.inverse_symbol)

    def apply_operator(self, v) -> np.ndarray:
        """The conjugated Laplacian itself (inverse of ``apply``)."""
        v = np.asarray(v).reshape(self.grid.shape)
        return self.twist * sfft.ifftn(sfft.fftn(np.conj(self.twist) * v) * self.symbol)

    @cached_property
    def kernel(self) -> np.ndarray:
        return self.twist * sfft.ifftn(self.inverse_symbol)

    def block(self, rows, cols, chunk: int = 256) -> np.ndarray:
        """Dense matrix entries G(x_r - x_c) for flat grid indices, antiperiodic wrap."""
        m = self.grid.m
        rows, cols = np.asarray(rows), np.asarray(cols)
        ci = np.stack(np.unravel_index(cols, self.grid.shape), axis=-1)
        out = np.empty((rows.size, cols.size), dtype=complex)
        for s in range(0, rows.size, chunk):
            ri = np.stack(np.unravel_index(rows[s:s + chunk], self.grid.shape), axis=-1)
            d = ri[:, None, :] - ci[None, :, :]
            neg = (d < 0).sum(axis=-1) % 2 == 1
            d = np.mod(d, m)
            blk = self.kernel[d[..., 0], d[..., 1], d[..., 2]]
            blk[neg] *= -1.0
            out[s:s + chunk] = blk
        return out

    def transpose(self) -> "FaddeevGreen":
        return FaddeevGreen(self.grid, -self.zeta, self.kind)

    def symbol_at(self, theta) -> complex:
        zp = -1j * self.zeta
        theta = np.asarray(theta, dtype=float)
        if self.kind == "lattice":
            h = self.grid.h
            return complex(np.sum((4.0 / h**2) * np.sin((theta + zp) * h / 2.0) ** 2))
        return complex(theta @ theta + 2.0 * zp @ theta)


def _green_for(freq, grid: TorusGrid, kind: str) -> FaddeevGreen:
    if isinstance(freq, ComplexFrequency):
        zeta = freq.lattice(grid.h)[0] if kind == "lattice" else freq.zeta
    else:
        zeta = freq
    return FaddeevGreen(grid, zeta, kind)


def faddeev_convolve(zeta, f, grid: TorusGrid | None = None, kind: str = "spectral") -> np.ndarray:
    """Apply the periodized Green operator with symbol 1/(theta.theta + 2 zeta'.theta)."""
    f = np.asarray(f)
    if grid is None:
        grid = TorusGrid(f.shape[0])
    return _green_for(zeta, grid, kind).apply(f)


@dataclass
class CgoSolution:
    r: np.ndarray
    trace: np.ndarray
    zeta: np.ndarray
    freq: ComplexFrequency | None
    residual: float
    iterations: int
    contraction: float = float("nan")

    def psi(self, grid: TorusGrid) -> np.ndarray:
        X, Y, Z = grid.mesh()
        z = self.zeta
        return np.exp(z[0] * X + z[1] * Y + z[2] * Z) * (1.0 + self.r)


def _exp_at(zeta, pts) -> np.ndarray:
    return np.exp(pts @ np.asarray(zeta))


def cgo_contraction(q, green: FaddeevGreen, iters: int = 30, seed: int = 0) -> float:
    """Power estimate of the spectral radius of v -> q G v on supp q."""
    qv = q.values if hasattr(q, "values") else np.asarray(q).reshape(-1)
    supp = np.flatnonzero(qv)
    if supp.size == 0:
        return 0.0
    grid = green.grid
    x = np.random.default_rng(seed).standard_normal(supp.size) + 0j
    x /= np.linalg.norm(x)
    est = 0.0
    buf = np.zeros(grid.size, dtype=complex)
    for _ in range(iters):
        buf[:] = 0
        buf[supp] = x
        y = qv[supp] * green.apply(buf).reshape(-1)[supp]
        est = np.linalg.norm(y)
        if est == 0:
            return 0.0
        x = y / est
    return float(est)


def solve_cgo(q, freq, domain=None, kind: str = "lattice", green: FaddeevGreen | None = None,
              tol: float = 1e-13, x0=None, measure_contraction: bool = False) -> CgoSolution:
    """Solve r = -G(q (1 + r)) for the remainder and take the trace of psi on the panels.

    The unknown is v = q (1 + r) on the support of q, found from (I + q G) v = q by
    GMRES with FFT matrix-vector products; then r = -G v.
    """
    domain = domain if domain is not None else q.domain
    grid = domain.grid
    green = green or _green_for(freq, grid, kind)
    zeta = green.zeta
    qv = q.values
    supp = np.flatnonzero(qv)
    pts = domain.mesh.centroids
    if supp.size == 0:
        r = np.zeros(grid.shape, dtype=complex)
        return CgoSolution(r, _exp_at(zeta, pts), zeta, freq if isinstance(freq, ComplexFrequency) else None,
                           0.0, 0, 0.0)
    qs = qv[supp]
    buf = np.zeros(grid.size, dtype=complex)

    def matvec(x):
        buf[:] = 0
        buf[supp] = x
        return x + qs * green.apply(buf).reshape(-1)[supp]

    op = spla.LinearOperator((supp.size, supp.size), matvec=matvec, dtype=complex)
    rhs = qs.astype(complex)
    count = [0]

    def _tick(_):
        count[0] += 1

    v, info = spla.gmres(op, rhs, x0=x0, rtol=tol, atol=0.0, restart=60, maxiter=40,
                         callback=_tick, callback_type="pr_norm")
    buf[:] = 0
    buf[supp] = v
    r = -green.apply(buf)
    # residual of the remainder equation on the full grid
    res_vec = r + green.apply(qv.reshape(grid.shape) * (1.0 + r))
    rn = np.linalg.norm(r)
    residual = float(np.linalg.norm(res_vec) / rn) if rn > 0 else 0.0
    contraction = cgo_contraction(q, green) if (measure_contraction or info != 0 or residual > 1e-8) else float("nan")
    if info != 0 or residual > 1e-8:
        raise CgoError(f"remainder equation residual {residual:.3e} (gmres info {info})", contraction)
    flat = r.reshape(-1)
    trace = _exp_at(zeta, pts) * (1.0 + flat[domain.mesh.nodes])
    return CgoSolution(r, trace, zeta, freq if isinstance(freq, ComplexFrequency) else None,
                       residual, count[0], contraction)


def calibrate_t(q, domain, k=(0, 0, 0), target: float = 0.5, t0: float = 0.25, kind: str = "lattice",
                t_max: float = 1e4) -> tuple[float, float]:
    """Smallest t on the doubling ladder t0, 2 t0, ... whose CGO contraction is <= target."""
    t = t0
    while t <= t_max:
        freq = make_zeta(k, t)
        rho = cgo_contraction(q, _green_for(freq, domain.grid, kind))
        if rho <= target:
            return t, rho
        t *= 2.0
    raise CgoError(f"no t below {t_max} reaches contraction {target}", rho)
