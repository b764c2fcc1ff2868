import numpy as np
import pytest

from finite_calderon.cgo import (
    FaddeevGreen, calibrate_t, cgo_contraction, faddeev_convolve, lattice_pair, make_zeta, order_frequencies,
    solve_cgo, tangent_frame,
)
from finite_calderon.errors import FrequencyError, ResonantFrequencyError
from finite_calderon.forward import Potential
from finite_calderon.grid import TorusGrid


def _band_limited(m, seed, kmax=3):
    """Random antiperiodic trigonometric polynomial with modes 2 pi (kappa + 1/2), |kappa_j| <= kmax."""
    rng = np.random.default_rng(seed)
    g = TorusGrid(m)
    X, Y, Z = g.mesh()
    f = np.zeros(g.shape, dtype=complex)
    for _ in range(6):
        kap = rng.integers(-kmax, kmax + 1, 3) + 0.5
        f += (rng.standard_normal() + 1j * rng.standard_normal()) * np.exp(
            2j * np.pi * (kap[0] * X + kap[1] * Y + kap[2] * Z))
    return g, f


def _conjugated_laplacian(u, zeta, g):
    """(-Delta - 2 zeta . grad) u by numpy spectral differentiation on antiperiodic functions."""
    m = g.m
    kap = np.fft.fftfreq(m, d=1.0 / m)
    th = 2 * np.pi * (kap + 0.5)
    j = np.arange(m)
    tw1 = np.exp(1j * np.pi * j / m)
    tw = tw1[:, None, None] * tw1[None, :, None] * tw1[None, None, :]
    U = np.fft.fftn(u / tw)
    T = np.meshgrid(th, th, th, indexing="ij")
    sym = sum(t * t for t in T) - 2j * sum(z * t for z, t in zip(zeta, T))
    return tw * np.fft.ifftn(sym * U)


@pytest.mark.parametrize("n", range(1, 6))
def test_spectral_faddeev_inversion(n):
    sched = order_frequencies(10, c=0.5)
    fr = sched.frequency(n)
    g, f = _band_limited(16, n)
    u = faddeev_convolve(fr, f, g, kind="spectral")
    back = _conjugated_laplacian(u, fr.zeta, g)
    assert np.abs(back - f).max() <= 1e-12 * np.abs(f).max()


def test_zeta_invariants_first_50():
    sched = order_frequencies(50, c=1.0)
    for n in range(1, 51):
        fr = sched.frequency(n)
        assert abs(fr.zeta @ fr.zeta) <= 1e-12 * max(1.0, np.linalg.norm(fr.zeta) ** 2)
        assert abs(fr.zeta_tilde @ fr.zeta_tilde) <= 1e-12 * max(1.0, np.linalg.norm(fr.zeta_tilde) ** 2)
        assert np.abs(fr.zeta + fr.zeta_tilde + 2j * np.pi * fr.k).max() <= 1e-12


def test_lattice_pair_is_discrete_harmonic():
    h = 1 / 24
    for k, t in [((0, 0, 0), 1.0), ((1, 2, 0), 3.0), ((2, 1, 1), 20.0)]:
        fr = make_zeta(k, t)
        zh, zth = lattice_pair(fr, h)
        assert abs(np.cosh(zh * h).sum() - 3) < 1e-12
        assert abs(np.cosh(zth * h).sum() - 3) < 1e-12
        assert np.abs(zh + zth + 2j * np.pi * np.array(k)).max() < 1e-12
        assert np.abs(zh - fr.zeta).max() < 0.1 * np.linalg.norm(fr.zeta)


def test_schedule_order_and_constants():
    s = order_frequencies(27, c=2.0)
    norms2 = (s.ks**2).sum(axis=1)
    assert np.all(np.diff(norms2) >= 0)
    assert np.array_equal(s.ks[0], [0, 0, 0])
    assert len({tuple(k) for k in s.ks}) == 27
    assert np.allclose(s.t, 2.0 * (s.norms**3 + 1))
    n = np.arange(1, 28)
    assert np.all(s.norms <= s.c_rho * n ** (1 / 3) + 1e-12)
    with pytest.raises(FrequencyError):
        order_frequencies(5, c=0.1, c1=1.0)
    with pytest.raises(FrequencyError):
        make_zeta((1, 0, 0), 0.5, c1=1.0)


def test_tangent_frame_orthonormal():
    for k in [(1, 0, 0), (0, 0, 2), (1, 2, 3), (0, -1, 1)]:
        xi, eta = tangent_frame(k)
        M = np.array([xi, eta, np.asarray(k) / np.linalg.norm(k)])
        assert np.abs(M @ M.T - np.eye(3)).max() < 1e-14


def test_resonance_detected():
    g = TorusGrid(8)
    th0 = np.pi * np.ones(3)
    with pytest.raises(ResonantFrequencyError):
        FaddeevGreen(g, -1j * th0 / 2, kind="spectral")


def test_green_inverts_operator_and_transpose(box16):
    fr = make_zeta((1, 0, 1), 4.0)
    G = FaddeevGreen(box16.grid, fr.lattice(box16.grid.h)[0])
    rng = np.random.default_rng(0)
    v = rng.standard_normal(box16.grid.shape) + 1j * rng.standard_normal(box16.grid.shape)
    assert np.abs(G.apply_operator(G.apply(v)) - v).max() < 1e-10 * np.abs(v).max()
    rows = rng.choice(box16.grid.size, 30, replace=False)
    cols = rng.choice(box16.grid.size, 20, replace=False)
    M = G.block(rows, cols)
    assert np.abs(M.T - G.transpose().block(cols, rows)).max() < 1e-12 * np.abs(M).max()
    e = np.zeros(box16.grid.size, dtype=complex)
    e[cols[0]] = 1.0
    assert np.abs(G.apply(e).reshape(-1)[rows] - M[:, 0]).max() < 1e-12 * np.abs(M).max()


def test_zero_potential_gives_plane_wave(box16):
    fr = make_zeta((1, 1, 0), 2.0)
    sol = solve_cgo(Potential.zero(box16), fr, box16)
    assert not np.any(sol.r)
    zh = fr.lattice(box16.grid.h)[0]
    assert np.allclose(sol.trace, np.exp(box16.mesh.centroids @ zh))


def _pde_residual(q, sol):
    g = q.domain.grid
    psi = sol.psi(g)
    lap = sum(np.roll(psi, 1, a) + np.roll(psi, -1, a) for a in range(3)) - 6 * psi
    core = (slice(3, -3),) * 3
    res = (-lap / g.h**2 + q.grid() * psi)[core]
    return np.abs(res).max() / np.abs(psi[core]).max() * g.h**2


def test_cgo_solves_discrete_equation(gauss_q):
    for k, t in [((0, 0, 0), 1.0), ((1, 2, 0), 3.0)]:
        sol = solve_cgo(gauss_q, make_zeta(k, t))
        assert sol.residual <= 1e-8
        assert _pde_residual(gauss_q, sol) < 1e-10


def test_flipped_sign_breaks_equation(gauss_q):
    flipped = Potential(gauss_q.domain, -gauss_q.values)
    sol = solve_cgo(flipped, make_zeta((1, 0, 0), 2.0))
    assert _pde_residual(gauss_q, sol) > 1e-6


def test_remainder_decreases_in_t(gauss_q):
    h3 = gauss_q.domain.grid.cell_volume
    norms = []
    for t in (2.0, 4.0, 8.0, 16.0):
        sol = solve_cgo(gauss_q, make_zeta((1, 0, 0), t))
        assert sol.residual <= 1e-8
        norms.append(np.sqrt(h3 * np.sum(np.abs(sol.r) ** 2)))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_calibrate_t(gauss_q):
    t, rho = calibrate_t(gauss_q, gauss_q.domain, target=0.25)
    assert rho <= 0.25
    if t > 0.25:
        G = FaddeevGreen(gauss_q.domain.grid, make_zeta((0, 0, 0), t / 2).lattice(gauss_q.domain.grid.h)[0])
        assert cgo_contraction(gauss_q, G) > 0.25
