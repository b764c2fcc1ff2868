import numpy as np
import pytest

import finite_calderon.layers as layers
from finite_calderon.cgo import make_zeta, order_frequencies, solve_cgo
from finite_calderon.errors import ContainerError, SingleLayerError
from finite_calderon.forward import Potential, dtn_map
from finite_calderon.grid import BoxSpec, TorusGrid, build_domain
from finite_calderon.layers import (
    SingleLayer, SingleLayerOp, invert_single_layer, jump_diagnostic, single_layer_apply, single_layer_matrix,
)
from finite_calderon.phantoms import random_phantom


@pytest.fixture(scope="module")
def q0_small(small_box):
    return random_phantom(small_box, 11, amplitude=1.0)


def test_bilinear_transpose(q0_small):
    d = q0_small.domain
    S = SingleLayer(q0_small, make_zeta((1, 0, 1), 3.0))
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, d.mesh.n))
    assert np.dot(a, S.apply(b)) == pytest.approx(np.dot(S.apply_transpose(a), b), rel=1e-10)


def test_matrix_columns_and_woodbury(q0_small, monkeypatch):
    S = SingleLayer(q0_small, make_zeta((0, 1, 0), 2.0))
    M = S.matrix()
    e = np.zeros(q0_small.domain.mesh.n)
    e[5] = 1.0
    assert np.abs(M[:, 5] - S.apply(e)).max() < 1e-10 * np.abs(M).max()
    monkeypatch.setattr(layers, "DENSE_SUPPORT_LIMIT", 0)
    M2 = SingleLayer(q0_small, make_zeta((0, 1, 0), 2.0)).matrix()
    assert np.abs(M - M2).max() < 1e-10 * np.abs(M).max()


def test_field_solves_equation(q0_small):
    d = q0_small.domain
    g = d.grid
    fr = make_zeta((1, 0, 0), 2.0)
    S = SingleLayer(q0_small, fr)
    phi = np.random.default_rng(1).standard_normal(d.mesh.n)
    u = S.field(phi)
    lap = sum(np.roll(u, 1, a) + np.roll(u, -1, a) for a in range(3)) - 6 * u
    res = (-lap / g.h**2 + q0_small.grid() * u).reshape(-1)
    src = np.zeros(g.size, dtype=complex)
    src[d.mesh.nodes] = d.mesh.weights * phi / g.cell_volume
    core = np.zeros(g.shape, dtype=bool)
    core[2:-2, 2:-2, 2:-2] = True
    core = core.reshape(-1)
    assert np.abs(res - src)[core].max() < 1e-8 * np.abs(src).max()


def test_boundary_integral_equation(small_box, q0_small):
    """f_q = f_q0 - S^{q0} (Lambda_q - Lambda_q0) f_q with CGO traces computed independently."""
    q = Potential(small_box, q0_small.values + 0.3 * random_phantom(small_box, 12).values)
    diff = dtn_map(q).matrix - dtn_map(q0_small).matrix
    sched = order_frequencies(6, c=0.5)
    for n in range(1, 7):
        fr = sched.frequency(n)
        S = SingleLayer(q0_small, fr)
        fq = solve_cgo(q, fr, small_box).trace
        fq0 = solve_cgo(q0_small, fr, small_box).trace
        assert np.linalg.norm(fq - fq0 + S.apply(diff @ fq)) <= 1e-8 * np.linalg.norm(fq)


def test_single_layer_matrix_and_inverse(q0_small):
    op = single_layer_matrix(q0_small, make_zeta((1, 1, 0), 2.0))
    assert np.isfinite(op.condition) and op.norm > 0
    inv, rep = invert_single_layer(op)
    assert np.abs(inv @ op.matrix - np.eye(op.matrix.shape[0])).max() < 1e-6
    assert rep["rank"] == op.matrix.shape[0]
    with pytest.raises(SingleLayerError, match="condition"):
        invert_single_layer(op, cond_cap=1.0)


def test_single_layer_container(tmp_path, q0_small):
    op = single_layer_matrix(q0_small, make_zeta((0, 0, 0), 1.0))
    op.save(tmp_path / "s.bin", dtype="<c16")
    back = SingleLayerOp.load(tmp_path / "s.bin", q0_small.domain)
    assert np.array_equal(back.matrix, op.matrix)
    assert back.condition == op.condition and back.freq == op.freq
    other = build_domain(TorusGrid(16), BoxSpec(0.125, 0.875))
    with pytest.raises(ContainerError):
        SingleLayerOp.load(tmp_path / "s.bin", other)


def test_apply_wrapper_returns_boundary_function(q0_small):
    phi = np.ones(q0_small.domain.mesh.n)
    bf = single_layer_apply(q0_small, make_zeta((0, 0, 0), 1.0), phi)
    assert bf.values.shape == phi.shape


def jump_error(m: int) -> float:
    d = build_domain(TorusGrid(m), BoxSpec(0.125, 0.875))
    X, Y, Z = d.grid.mesh()
    q0 = Potential(d, np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2 + (Z - 0.5) ** 2) / 0.03) * d.mask)
    P = d.mesh.centroids
    phi = np.cos(2 * np.pi * P[:, 0]) + P[:, 1]
    j = jump_diagnostic(q0, make_zeta((1, 0, 0), 2.0), phi).values
    w = d.mesh.weights
    return float(np.sqrt(np.sum(w * np.abs(j - phi) ** 2) / np.sum(w * phi**2)))


@pytest.mark.slow
def test_jump_relation_converges():
    errs = [jump_error(m) for m in (16, 24, 32)]
    assert errs[0] > errs[1] > errs[2]
