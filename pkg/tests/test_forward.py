import numpy as np
import pytest

from finite_calderon.errors import ContainerError, DirichletEigenvalueError
from finite_calderon.forward import (
    DirichletSolver, DtNMap, Potential, boundary_flux, dirichlet_ground_state, dtn_map, green_volume_term,
    make_noise, op_norm_star, resolvent_norm_estimate, solve_dirichlet,
)
from finite_calderon.grid import BoxSpec, TorusGrid, boundary_pairing, build_domain, trace
from finite_calderon.phantoms import random_phantom


def manufactured_error(m: int) -> float:
    """L2 error for u* = sin(2 pi x) sin(pi (y-.1)/.8) sin(pi (z-.1)/.8) with q = 1."""
    d = build_domain(TorusGrid(m), BoxSpec(0.25, 0.75))
    X, Y, Z = d.grid.mesh()
    us = np.sin(2 * np.pi * X) * np.sin(np.pi * (Y - 0.1) / 0.8) * np.sin(np.pi * (Z - 0.1) / 0.8)
    src = (4 * np.pi**2 + 2 * (np.pi / 0.8) ** 2) * us + us
    q = Potential(d, np.ones(d.n_interior))
    u = solve_dirichlet(q, trace(us, d).values.real, source=src)
    return float(np.sqrt(d.grid.cell_volume * np.sum((u - us).ravel()[d.interior] ** 2)))


def test_manufactured_second_order():
    e16, e32 = manufactured_error(16), manufactured_error(32)
    assert np.log2(e16 / e32) >= 1.9


def test_linear_function_has_exact_flux(small_box):
    X, _, _ = small_box.grid.mesh()
    L0 = dtn_map(Potential.zero(small_box))
    f = trace(X, small_box).values.real
    assert np.abs(L0.matrix @ f - small_box.mesh.normals[:, 0]).max() < 1e-12


def test_constant_in_kernel_of_zero_map(small_box):
    L0 = dtn_map(Potential.zero(small_box))
    assert np.abs(L0.matrix @ np.ones(small_box.mesh.n)).max() < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_alessandrini_identity(small_box, seed):
    rng = np.random.default_rng(seed)
    q1 = Potential(small_box, rng.uniform(-3, 3, small_box.n_interior))
    q2 = random_phantom(small_box, seed, amplitude=2.0)
    L1, L2 = dtn_map(q1), dtn_map(q2)
    f1, f2 = rng.standard_normal((2, small_box.mesh.n))
    lhs = boundary_pairing(f1, (L1.matrix - L2.matrix) @ f2, small_box.mesh)
    rhs = green_volume_term(q1, q2, solve_dirichlet(q1, f1), solve_dirichlet(q2, f2))
    assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_weighted_symmetry(small_box, gauss_q):
    L = dtn_map(random_phantom(small_box, 4))
    assert L.symmetry_defect < 1e-12


def test_flux_matches_map(small_box):
    q = random_phantom(small_box, 1)
    solver = DirichletSolver(q)
    f = np.random.default_rng(1).standard_normal(small_box.mesh.n)
    L = dtn_map(q, solver)
    assert np.allclose(boundary_flux(solver.solve(f), small_box), L.matrix @ f, atol=1e-10)


def test_zero_potential_resolvent_is_one(small_box):
    assert resolvent_norm_estimate(Potential.zero(small_box)) == pytest.approx(1.0, rel=1e-8)


def test_dirichlet_eigenvalue_detected(small_box):
    lam = dirichlet_ground_state(small_box)
    q = Potential(small_box, np.full(small_box.n_interior, -lam))
    with pytest.raises(DirichletEigenvalueError):
        DirichletSolver(q)


def test_noise_norm_and_reproducibility(small_box):
    E1 = make_noise(0.01, 3, small_box)
    E2 = make_noise(0.01, 3, small_box)
    assert abs(op_norm_star(E1) - 0.01) <= 1e-12
    assert E1.matrix.tobytes() == E2.matrix.tobytes()
    assert not np.array_equal(E1.matrix, make_noise(0.01, 4, small_box).matrix)
    assert op_norm_star(make_noise(0.0, 3, small_box)) == 0.0
    with pytest.raises(ValueError):
        make_noise(-1.0, 0, small_box)


def test_potential_validation(small_box):
    with pytest.raises(ValueError, match="outside"):
        Potential(small_box, np.ones(small_box.grid.size))
    with pytest.raises(ValueError, match="exceeds"):
        Potential(small_box, np.full(small_box.n_interior, 2.0), R=1.0)


def test_dtn_container_roundtrip(tmp_path, small_box):
    L = dtn_map(random_phantom(small_box, 2))
    L.save(tmp_path / "a.bin", dtype="<c16")
    back = DtNMap.load(tmp_path / "a.bin", small_box)
    assert np.array_equal(back.matrix, L.matrix) and back.matrix.dtype == np.float64
    L.save(tmp_path / "b.bin")  # default complex64 payload
    lossy = DtNMap.load(tmp_path / "b.bin", small_box)
    assert np.abs(lossy.matrix - L.matrix).max() <= 1e-6 * np.abs(L.matrix).max()
    other = build_domain(TorusGrid(16), BoxSpec(0.125, 0.875))
    with pytest.raises(ContainerError):
        DtNMap.load(tmp_path / "a.bin", other)
