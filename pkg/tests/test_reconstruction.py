import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finite_calderon.cgo import order_frequencies
from finite_calderon.config import parse_config
from finite_calderon.errors import CalderonError
from finite_calderon.experiments import run_pipeline
from finite_calderon.forward import Potential, dtn_map
from finite_calderon.grid import TorusGrid
from finite_calderon.reconstruction import (
    ReconstructionContext, ReconstructionResult, SubspaceW, apply_A, b_perturbation, choose_N, cube_order,
    fourier_coeffs, fourier_full, inverse_fourier, iterate, project_WR, projection_constant,
)
from finite_calderon.synthesis import measure_noise_free, synthesize_fL


# --------------------------------------------------------------------- Fourier

def test_fourier_of_plane_wave_and_point():
    g = TorusGrid(8)
    X = g.points(np.arange(g.size))
    k0 = np.array([1, -2, 3])
    wave = np.exp(2j * np.pi * X @ k0)
    ks = np.array([k0, [0, 0, 0], [1, 0, 0]])
    assert np.allclose(fourier_coeffs(wave, ks, g), [1, 0, 0], atol=1e-13)
    point = np.zeros(g.size)
    point[37] = 1.0
    expect = g.cell_volume * np.exp(-2j * np.pi * ks @ X[37])
    assert np.allclose(fourier_coeffs(point, ks, g), expect, atol=1e-15)


def test_parseval_and_inverse():
    g = TorusGrid(8)
    q = np.random.default_rng(0).standard_normal(g.size)
    full = fourier_full(q, g)
    assert np.sum(np.abs(full) ** 2) == pytest.approx(g.cell_volume * np.sum(q**2), rel=1e-12)
    ks = cube_order(8)
    assert len(ks) == g.size and len({tuple(k % 8) for k in ks}) == g.size
    back = inverse_fourier(fourier_coeffs(q, ks, g), ks, g).reshape(-1)
    assert np.abs(back - q).max() < 1e-12


def test_cube_order_sorted_by_norm():
    n2 = (cube_order(6) ** 2).sum(axis=1)
    assert np.all(np.diff(n2) >= 0) and n2[0] == 0


# ------------------------------------------------------------- subspace and projection

@pytest.fixture(scope="module")
def W_prolate(box16):
    return SubspaceW.prolate(box16, R=1.0)


def test_bases_orthonormal(box16, W_prolate):
    for W in (W_prolate, SubspaceW.partition(box16, 3, 1.0)):
        G = box16.grid.cell_volume * W.basis @ W.basis.T
        assert np.abs(G - np.eye(W.dim)).max() <= 1e-12
        assert W.dim == 8 if W.kind == "prolate" else W.dim == 27


def test_prolate_needs_box(ball32):
    with pytest.raises(ValueError):
        SubspaceW.prolate(ball32, 1.0)


def test_projection_inside_is_identity(W_prolate):
    c = np.array([0.1, 0.05, 0, 0, 0.02, 0, 0, 0])
    vals, c2, cert = project_WR(W_prolate.synth(c), W_prolate)
    assert not cert.active and np.abs(c - c2).max() < 1e-14


def test_partition_clamp(box16):
    W = SubspaceW.partition(box16, 2, R=0.5)
    c = np.array([3, -3, 0.1, 0, 0, 0, 0, 0.2]) / W.basis.max()
    vals, c2, cert = project_WR(W.synth(c), W)
    assert cert.active
    assert np.abs(vals).max() == pytest.approx(0.5)
    per_cell = c2 * W.basis.max()
    assert np.allclose(per_cell, [0.5, -0.5, 0.1, 0, 0, 0, 0, 0.2])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1.0, 20.0))
def test_projection_nonexpansive_and_idempotent(W_prolate, seed, scale):
    rng = np.random.default_rng(seed)
    W = W_prolate
    a, b = scale * rng.standard_normal((2, W.dim))
    pa, ca, cert = project_WR(W.synth(a), W)
    pb, cb, _ = project_WR(W.synth(b), W)
    assert np.linalg.norm(ca - cb) <= np.linalg.norm(a - b) * (1 + 1e-8)
    assert W.sup(ca) <= W.R * (1 + 1e-9)
    _, cc, _ = project_WR(pa, W)
    assert np.linalg.norm(cc - ca) <= 1e-8 * max(1.0, np.linalg.norm(ca))
    if cert.active:
        assert cert.kkt_residual <= 1e-10


def test_projection_variational_inequality(W_prolate):
    """<c0 - P c0, w - P c0> <= 0 for feasible w."""
    W = W_prolate
    rng = np.random.default_rng(3)
    c0 = 8 * rng.standard_normal(W.dim)
    _, p, _ = project_WR(W.synth(c0), W)
    for _ in range(20):
        w = rng.standard_normal(W.dim)
        w *= 0.99 * W.R / W.sup(w)
        assert np.dot(c0 - p, w - p) <= 1e-7 * np.linalg.norm(c0)


def test_projection_constant_monotone_to_zero(small_box):
    W = SubspaceW.partition(small_box, 2, 1.0)
    curve = projection_constant(W)
    assert curve[0] <= 1 + 1e-12
    assert np.all(np.diff(curve) <= 1e-12)
    assert curve[-1] < 1e-6


@pytest.mark.parametrize("s", [2, 3])
def test_choose_N_partitions(box16, s):
    W = SubspaceW.partition(box16, s, 1.0)
    N, pn = choose_N(W, cap=4000)
    assert pn <= 0.25 and W.N == N
    curve = projection_constant(W, cap=N)
    assert curve[N - 2] > 0.25


def test_choose_N_reports_failure(box16):
    with pytest.raises(CalderonError):
        choose_N(SubspaceW.partition(box16, 3, 1.0), cap=10)


# ----------------------------------------------------------------- B and T

@pytest.fixture(scope="module")
def W_small(small_box):
    W = SubspaceW.prolate(small_box, R=2.0)
    choose_N(W)
    return W


def test_B_of_zero_vanishes(small_box):
    sched = order_frequencies(5, c=0.5)
    assert np.all(b_perturbation(Potential.zero(small_box), sched, 5) == 0)


def test_B_routes_agree(small_box, W_small):
    q = W_small.potential(0.3 * np.random.default_rng(1).standard_normal(W_small.dim))
    sched = order_frequencies(6, c=0.5)
    vol = b_perturbation(q, sched, 6)
    bnd = b_perturbation(q, sched, 6, route="boundary", dtn_q=dtn_map(q), dtn0=dtn_map(Potential.zero(small_box)))
    assert np.abs(vol - bnd).max() <= 1e-8 * max(1.0, np.abs(vol).max())


def test_T_vanishes_for_zero_data(small_box, W_small):
    zero = Potential.zero(small_box)
    d0 = dtn_map(zero)
    sched = order_frequencies(W_small.N, c=0.5)
    ms = synthesize_fL(measure_noise_free(d0), zero, d0, sched, W_small.N, L=1)
    ctx = ReconstructionContext(W_small, sched, zero, measure_noise_free(d0), d0, ms, dtn0=d0)
    assert np.all(ctx.T(zero) == 0)
    vals, c = apply_A(np.zeros(W_small.dim), ctx)
    assert np.abs(c).max() < 1e-12


def test_flux_trick_matches_explicit_zero_map(small_box, W_small):
    q0 = W_small.potential(0.2 * np.ones(W_small.dim) / np.sqrt(W_small.dim))
    qbar = W_small.potential(q0.values[small_box.interior] @ W_small.basis.T * small_box.grid.cell_volume + 0.01)
    sched = order_frequencies(W_small.N, c=0.5)
    d0, dq = dtn_map(q0), dtn_map(qbar)
    meas = measure_noise_free(dq)
    ms = synthesize_fL(meas, q0, d0, sched, 4, L=2)
    a = ReconstructionContext(W_small, sched, q0, meas, d0, ms, N=4)
    b = ReconstructionContext(W_small, sched, q0, meas, d0, ms, N=4, dtn0=dtn_map(Potential.zero(small_box)))
    assert np.abs(a.c - b.c).max() <= 1e-9 * np.abs(b.c).max()


# ----------------------------------------------------------- end to end at m = 16

@pytest.fixture(scope="module")
def exact_run():
    cfg = parse_config("m = 16\ndomain = box:0.25,0.75\nR = 3.0\n")
    sc, res, ms, meas = run_pipeline(cfg, eta=0.0, eps=0.0)
    return cfg, sc, res, ms, meas


def test_A_fixes_truth(exact_run):
    cfg, sc, res, ms, meas = exact_run
    from finite_calderon.experiments import forward_maps

    ctx = ReconstructionContext(sc.W, sc.sched, sc.q0, meas, forward_maps(sc, need_zero=False)["q0"], ms, N=sc.N)
    vals, c, parts = apply_A(sc.qbar_coeffs, ctx, return_parts=True)
    assert np.linalg.norm(c - sc.qbar_coeffs) < 1e-10
    resid = parts["T"] - parts["F"] - parts["B"]
    # by Parseval this is the L2 size of the update; it must sit below the stopping tolerance
    assert np.linalg.norm(resid) <= cfg.tol


def test_exact_recovery_and_tail_bound(exact_run):
    cfg, sc, res, ms, meas = exact_run
    assert res.converged and not res.non_contraction
    assert res.errors[-1] < 1e-9
    assert np.all(res.ratios[1:] <= 7 / 8 + 0.05) if res.ratios.size > 1 else True
    assert res.tail_bound_holds()
    assert res.check_consistency() == 0.0


def test_limit_independent_of_start(exact_run):
    cfg, sc, res, ms, meas = exact_run
    from finite_calderon.experiments import forward_maps

    ctx = ReconstructionContext(sc.W, sc.sched, sc.q0, meas, forward_maps(sc, need_zero=False)["q0"], ms, N=sc.N)
    other = iterate(sc.q0_coeffs, ctx, tol=cfg.tol, truth=sc.qbar)
    assert other.converged
    assert np.linalg.norm(other.coeffs[-1] - res.coeffs[-1]) <= 2 * cfg.tol


def test_initial_guess_outside_ball_rejected(exact_run):
    cfg, sc, res, ms, meas = exact_run
    from finite_calderon.experiments import forward_maps

    ctx = ReconstructionContext(sc.W, sc.sched, sc.q0, meas, forward_maps(sc, need_zero=False)["q0"], ms, N=sc.N)
    big = np.ones(sc.W.dim) * 10 * sc.W.R / sc.W.sup(np.ones(sc.W.dim))
    with pytest.raises(ValueError):
        iterate(big, ctx)


def test_result_save(exact_run, tmp_path):
    res = exact_run[2]
    res.save(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["iterations"] == res.iterations and man["converged"]
    head, arr = ReconstructionResult.load_arrays(tmp_path)
    assert np.array_equal(arr["coeffs"], res.coeffs)
    rows = (tmp_path / "iterations.csv").read_text().strip().splitlines()
    assert len(rows) == res.iterations + 1
    assert "timings" not in man
