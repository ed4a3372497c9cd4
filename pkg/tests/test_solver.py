import numpy as np
import pytest

from dwreuler.assembly import BlockMatrix, assemble_jacobian, assemble_residual
from dwreuler.gasdynamics import FlowConfig
from dwreuler.mesh import Agglomeration
from dwreuler.solver import (
    REG_LOCAL_TIME,
    REG_RESIDUAL_SCALED,
    ConvergenceTrace,
    NewtonSettings,
    SolverError,
    build_hierarchy,
    default_agglomeration,
    gmg_solve,
    newton_solve,
    regularize,
)


def _freestream_field(mesh, cfg):
    return np.tile(cfg.freestream(), (mesh.n_cells, 1))


def _identity_blocks(n, scale=1.0):
    blocks = np.tile(scale * np.eye(4), (n, 1, 1))
    idx = np.arange(n)
    return BlockMatrix.from_blocks(idx, idx, blocks, n)


def _simple_agglomeration(n, target=4):
    groups = np.arange(n) // target
    return Agglomeration(maps=[groups], group_counts=[int(groups.max()) + 1])


def test_settings_validation():
    with pytest.raises(ValueError):
        NewtonSettings(alpha=-1.0)
    with pytest.raises(ValueError):
        NewtonSettings(residual_tol=0.0)
    with pytest.raises(ValueError):
        NewtonSettings(damping=1.5)


def test_regularize_hand_case():
    A = _identity_blocks(1)
    R = np.array([[1.0, -2.0, 3.0, -4.0]])
    out = regularize(A, R, alpha=2.0, mode=REG_RESIDUAL_SCALED)
    # the diagonal gains alpha * (|1|+|2|+|3|+|4|) = 20 on each entry
    assert np.allclose(out.to_dense(), np.eye(4) * 21.0)
    # alpha = 0 leaves the operator untouched
    assert regularize(A, R, 0.0, REG_RESIDUAL_SCALED) is A


def test_regularize_global_weight():
    A = _identity_blocks(2)
    R = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]])
    out = regularize(A, R, 1.0, REG_RESIDUAL_SCALED, global_weight=True)
    d = np.diagonal(out.to_dense())
    assert np.allclose(d, 4.0)  # 1 + (1 + 2) everywhere


def test_regularize_local_time(naca400, flow05):
    A = _identity_blocks(naca400.n_cells)
    u = _freestream_field(naca400, flow05)
    R = np.zeros((naca400.n_cells, 4))
    out = regularize(
        A, R, 2.0, REG_LOCAL_TIME, mesh=naca400, field=u, cfl=5.0
    )
    d = np.diagonal(out.to_dense())
    assert np.all(d > 1.0)
    with pytest.raises(ValueError):
        regularize(A, R, 2.0, REG_LOCAL_TIME)
    with pytest.raises(ValueError):
        regularize(A, R, 2.0, "bogus")


def test_gmg_block_diagonal_single_cycle():
    rng = np.random.default_rng(401)
    n = 64
    raw = rng.normal(size=(n, 4, 4))
    blocks = raw @ raw.transpose(0, 2, 1) + 4.0 * np.eye(4)
    idx = np.arange(n)
    A = BlockMatrix.from_blocks(idx, idx, blocks, n)
    hier = build_hierarchy(A, _simple_agglomeration(n))
    b = rng.normal(size=(n, 4))
    x, info = gmg_solve(A, b, hier, tol=1e-14, max_cycles=5)
    assert info.converged
    assert info.cycles == 1
    assert info.achieved <= 1e-14


def test_gmg_zero_rhs():
    A = _identity_blocks(8)
    hier = build_hierarchy(A, _simple_agglomeration(8))
    x, info = gmg_solve(A, np.zeros((8, 4)), hier)
    assert np.array_equal(x, np.zeros((8, 4)))
    assert info.cycles == 0


def test_gmg_singular_diagonal_named():
    blocks = np.tile(np.eye(4), (5, 1, 1))
    blocks[3] = 0.0
    idx = np.arange(5)
    A = BlockMatrix.from_blocks(idx, idx, blocks, 5)
    with pytest.raises(SolverError, match="3"):
        build_hierarchy(A, _simple_agglomeration(5))


def test_gmg_dense_oracle(naca400, flow05):
    u = _freestream_field(naca400, flow05)
    res = assemble_residual(naca400, u, flow05, order=0)
    J = assemble_jacobian(naca400, u, flow05)
    Jr = regularize(J, res, 2.0, REG_RESIDUAL_SCALED)
    hier = build_hierarchy(Jr, default_agglomeration(naca400, NewtonSettings()))
    rng = np.random.default_rng(409)
    b = rng.normal(size=(naca400.n_cells, 4))
    x, info = gmg_solve(Jr, b, hier, tol=1e-10, max_cycles=30)
    assert info.converged
    assert info.cycles <= 30
    exact = np.linalg.solve(Jr.to_dense(), b.reshape(-1)).reshape(-1, 4)
    assert np.abs(x - exact).max() <= 1e-8 * max(1.0, np.abs(exact).max())
    # residual history is monotone up to the contracted allowance
    hist = np.array(info.history)
    if len(hist) > 1:
        assert np.sum(hist[1:] > hist[:-1]) <= max(1, len(hist) // 10)


def test_default_agglomeration_coarsest(naca3k):
    agg = default_agglomeration(naca3k, NewtonSettings())
    assert agg.group_counts[-1] <= 64
    u = np.tile(FlowConfig(0.5).freestream(), (naca3k.n_cells, 1))
    J = assemble_jacobian(naca3k, u, FlowConfig(0.5))
    hier = build_hierarchy(J.with_added_diagonal(
        np.tile(np.eye(4), (naca3k.n_cells, 1, 1))
    ), agg)
    assert hier.coarse_lu is not None


def test_newton_annulus_freestream(annulus3k, flow05):
    # the free stream solves the all-far-field problem exactly
    u0 = _freestream_field(annulus3k, flow05)
    field, trace = newton_solve(
        annulus3k, u0, NewtonSettings(residual_tol=1e-10), config=flow05
    )
    assert trace.converged
    assert len(trace.iters) <= 2
    assert trace.residual_l1[-1] <= 1e-10
    assert np.abs(field - u0).max() <= 1e-9


def test_newton_small_airfoil_and_restart(naca400, flow05):
    u0 = _freestream_field(naca400, flow05)
    st = NewtonSettings(residual_tol=1e-10)
    field, trace = newton_solve(naca400, u0, st, config=flow05)
    assert trace.converged
    assert trace.residual_l1[-1] <= 1e-10
    assert len(trace.iters) <= 50
    # monotone after the opening transient
    r = np.array(trace.residual_l1[5:])
    assert np.all(r[1:] <= r[:-1])
    # restarting from the fixed point stops immediately
    field2, trace2 = newton_solve(naca400, field, st, config=flow05)
    assert trace2.converged
    assert len(trace2.iters) == 1
    assert np.array_equal(field2, field)


def test_newton_local_time_mode(naca400, flow05):
    u0 = _freestream_field(naca400, flow05)
    st = NewtonSettings(residual_tol=1e-10, cfl=10.0)
    field, trace = newton_solve(naca400, u0, st, config=flow05)
    assert trace.converged
    assert trace.residual_l1[-1] <= 1e-10


def test_newton_deterministic(naca400, flow05):
    u0 = _freestream_field(naca400, flow05)
    st = NewtonSettings(residual_tol=1e-10)
    _, t1 = newton_solve(naca400, u0, st, config=flow05)
    _, t2 = newton_solve(naca400, u0, st, config=flow05)
    assert t1.residual_l1 == t2.residual_l1
    assert t1.linear_cycles == t2.linear_cycles


def test_newton_input_validation(naca400, flow05):
    u0 = _freestream_field(naca400, flow05)
    with pytest.raises(ValueError):
        newton_solve(naca400, u0, NewtonSettings())
    with pytest.raises(ValueError):
        newton_solve(naca400, u0[:-1], NewtonSettings(), config=flow05)
    bad = u0.copy()
    bad[0, 0] = -1.0
    with pytest.raises(SolverError):
        newton_solve(naca400, bad, NewtonSettings(), config=flow05)


def test_newton_nonconverged_flag(naca400, flow05):
    u0 = _freestream_field(naca400, flow05)
    st = NewtonSettings(residual_tol=1e-10, max_newton_iters=2)
    _, trace = newton_solve(naca400, u0, st, config=flow05)
    assert not trace.converged
    assert len(trace.iters) == 3  # two updates plus the closing record


def test_trace_csv(tmp_path):
    trace = ConvergenceTrace()
    trace.append(0, 1.0, 0.5, 1.0, 3)
    trace.append(1, 0.1, 0.4, 0.5, 7)
    path = tmp_path / "trace.csv"
    trace.to_csv(path, header_lines=("config: unit-test",))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "# config: unit-test"
    assert lines[1] == "iter,residual_l1,qoi,damping,linear_cycles"
    assert len(lines) == 4
    row = lines[2].split(",")
    assert int(row[0]) == 0
    assert float(row[1]) == 1.0
    assert int(row[4]) == 3
