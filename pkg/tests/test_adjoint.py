"""Force functionals, their gradients, and the transposed dual solve."""

import numpy as np
import pytest

from dwreuler import (
    CONSISTENT,
    INCONSISTENT,
    QOI_DRAG,
    QOI_LIFT,
    FlowConfig,
    NewtonSettings,
    QoiConfig,
    SolverError,
    evaluate_forces,
    evaluate_qoi,
    generate_airfoil_mesh,
    newton_solve,
    qoi_gradient,
    solve_dual,
)
from dwreuler.adjoint import _wall_pressures, qoi_gradient_analytic
from dwreuler.assembly import assemble_jacobian
from dwreuler.gasdynamics import WALL_MIRROR, WALL_PROJECTION, pressure
from dwreuler.reconstruction import _stencils, build_reconstruction

from conftest import random_normals


@pytest.fixture(scope="module")
def converged400(naca400, flow05):
    init = np.tile(flow05.freestream(), (naca400.n_cells, 1))
    u, trace = newton_solve(
        naca400, init, NewtonSettings(residual_tol=1e-10), config=flow05
    )
    assert trace.converged
    return u


@pytest.fixture(scope="module")
def sym800(flow05):
    mesh = generate_airfoil_mesh("0012", 40.0, 800, symmetric=True)
    init = np.tile(flow05.freestream(), (mesh.n_cells, 1))
    u, trace = newton_solve(
        mesh, init, NewtonSettings(residual_tol=1e-11), config=flow05
    )
    assert trace.converged
    return mesh, u


def _rest_state(n, p=2.3, gamma=1.4):
    u = np.zeros((n, 4))
    u[:, 0] = 1.7
    u[:, 3] = p / (gamma - 1.0)
    return u


class TestQoiConfig:
    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            QoiConfig(kind="thrust")

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            QoiConfig(consistency_mode="sometimes")

    def test_nonpositive_normalization_rejected(self):
        with pytest.raises(ValueError):
            QoiConfig(beta=(1.0, 0.0), c_inf=-0.5)

    def test_bound_fills_direction(self, flow05):
        q = QoiConfig(QOI_DRAG).bound(flow05)
        assert q.c_inf == pytest.approx(0.5)
        assert q.beta @ (q.c_inf * np.ones(2)) == pytest.approx(q.beta.sum() / 2)
        # unit direction scaled by 1/c_inf
        assert np.hypot(*q.beta) * q.c_inf == pytest.approx(1.0, abs=1e-14)

    def test_drag_lift_orthogonal(self):
        cfg = FlowConfig(0.73, 12.5)
        d = QoiConfig(QOI_DRAG).bound(cfg)
        l = QoiConfig(QOI_LIFT).bound(cfg)
        scale = float(d.beta @ d.beta)
        assert abs(float(d.beta @ l.beta)) <= 1e-15 * scale

    def test_drag_points_downstream(self):
        cfg = FlowConfig(0.5, 30.0)
        d = QoiConfig(QOI_DRAG).bound(cfg)
        v = cfg.freestream()[1:3]
        assert d.beta @ v == pytest.approx(1.0 / d.c_inf)


class TestEvaluate:
    def test_rest_state_zero_force(self, naca400, flow05):
        # constant pressure integrates n ds around a closed polygon: zero
        u = _rest_state(naca400.n_cells)
        for order in (0, 1):
            recon = build_reconstruction(naca400, u, order=order)
            for mode in (CONSISTENT, INCONSISTENT):
                for wall in (WALL_PROJECTION, WALL_MIRROR):
                    for kind in (QOI_DRAG, QOI_LIFT):
                        q = QoiConfig(kind, mode).bound(flow05)
                        val = evaluate_qoi(naca400, u, recon, q, wall)
                        assert abs(val) <= 1e-12

    def test_tangent_traces_make_modes_agree(self):
        # zero normal velocity: the projection is the identity there
        rng = np.random.default_rng(41)
        n = random_normals(rng, 40)
        t = np.stack([-n[:, 1], n[:, 0]], axis=1)
        u = np.empty((40, 4))
        u[:, 0] = 1.0 + rng.random(40)
        u[:, 1:3] = t * (0.3 + 0.5 * rng.random(40))[:, None]
        u[:, 3] = (2.0 + rng.random(40)) / 0.4 + 0.5 * (
            u[:, 1] ** 2 + u[:, 2] ** 2
        ) / u[:, 0]
        pc = _wall_pressures(u, n, CONSISTENT, WALL_PROJECTION, 1.4)
        pi = _wall_pressures(u, n, INCONSISTENT, WALL_PROJECTION, 1.4)
        assert np.array_equal(pc, pi)

    def test_mirror_wall_modes_coincide(self, naca400, flow05, converged400):
        # reflection preserves pressure, so the mirror wall cannot separate
        # the consistent functional from the raw-trace one
        recon = build_reconstruction(naca400, converged400, order=1)
        for kind in (QOI_DRAG, QOI_LIFT):
            qc = QoiConfig(kind, CONSISTENT).bound(flow05)
            qi = QoiConfig(kind, INCONSISTENT).bound(flow05)
            vc = evaluate_qoi(naca400, converged400, recon, qc, WALL_MIRROR)
            vi = evaluate_qoi(naca400, converged400, recon, qi, WALL_MIRROR)
            assert vc == pytest.approx(vi, abs=1e-15)

    def test_projection_wall_modes_differ(self, naca400, flow05, converged400):
        # weak wall enforcement leaves through-flow in the traces, which is
        # exactly what the consistent functional filters out
        recon = build_reconstruction(naca400, converged400, order=0)
        qc = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        qi = QoiConfig(QOI_DRAG, INCONSISTENT).bound(flow05)
        vc = evaluate_qoi(naca400, converged400, recon, qc, WALL_PROJECTION)
        vi = evaluate_qoi(naca400, converged400, recon, qi, WALL_PROJECTION)
        assert abs(vc - vi) > 1e-9

    def test_no_wall_edges_rejected(self, annulus3k, flow05):
        u = _rest_state(annulus3k.n_cells)
        recon = build_reconstruction(annulus3k, u, order=0)
        q = QoiConfig(QOI_DRAG).bound(flow05)
        with pytest.raises(ValueError, match="wall"):
            evaluate_qoi(annulus3k, u, recon, q)

    def test_field_must_match_reconstruction(self, naca400, flow05):
        u = _rest_state(naca400.n_cells)
        recon = build_reconstruction(naca400, u, order=0)
        q = QoiConfig(QOI_DRAG).bound(flow05)
        with pytest.raises(ValueError, match="match"):
            evaluate_qoi(naca400, u + 1e-3, recon, q)

    def test_unbound_qoi_needs_config(self, naca400):
        u = _rest_state(naca400.n_cells)
        recon = build_reconstruction(naca400, u, order=0)
        with pytest.raises(ValueError, match="bound"):
            evaluate_qoi(naca400, u, recon, QoiConfig(QOI_DRAG))

    def test_both_coefficients_one_sweep(
        self, naca400, flow05, converged400, monkeypatch
    ):
        import dwreuler.adjoint as adj

        calls = []
        inner = adj._wall_pressures

        def counting(*args, **kwargs):
            calls.append(1)
            return inner(*args, **kwargs)

        monkeypatch.setattr(adj, "_wall_pressures", counting)
        recon = build_reconstruction(naca400, converged400, order=1)
        force = evaluate_forces(naca400, converged400, recon)
        drag = QoiConfig(QOI_DRAG).bound(flow05)
        lift = QoiConfig(QOI_LIFT).bound(flow05)
        cd = float(force @ drag.beta)
        cl = float(force @ lift.beta)
        assert len(calls) == 1
        assert cd == pytest.approx(
            evaluate_qoi(naca400, converged400, recon, drag), abs=1e-15
        )
        assert cl == pytest.approx(
            evaluate_qoi(naca400, converged400, recon, lift), abs=1e-15
        )


class TestGradient:
    def test_fd_matches_analytic_inconsistent(
        self, naca400, flow05, converged400
    ):
        recon = build_reconstruction(naca400, converged400, order=0)
        for kind in (QOI_DRAG, QOI_LIFT):
            q = QoiConfig(kind, INCONSISTENT).bound(flow05)
            g_fd = qoi_gradient(naca400, converged400, recon, q)
            g_an = qoi_gradient_analytic(naca400, converged400, recon, q)
            scale = np.abs(g_an).max()
            assert np.abs(g_fd - g_an).max() <= 1e-5 * scale

    def test_gradient_local_to_wall_cells(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        g = qoi_gradient(naca400, converged400, recon, q)
        nz = np.nonzero(np.abs(g).sum(axis=1))[0]
        wall_cells = np.unique(
            naca400.edge_cells[naca400.wall_edges(), 0]
        )
        assert set(nz.tolist()) <= set(wall_cells.tolist())

    def test_gradient_order1_covers_stencil(
        self, naca400, flow05, converged400
    ):
        recon = build_reconstruction(naca400, converged400, order=1)
        q = QoiConfig(QOI_DRAG, INCONSISTENT).bound(flow05)
        g = qoi_gradient(naca400, converged400, recon, q)
        nz = set(np.nonzero(np.abs(g).sum(axis=1))[0].tolist())
        owners = np.unique(naca400.edge_cells[naca400.wall_edges(), 0])
        indptr, indices = _stencils(naca400)
        allowed = set(owners.tolist())
        for j in owners:
            allowed.update(indices[indptr[j] : indptr[j + 1]].tolist())
        assert nz and nz <= allowed

    def test_directional_ramp_slope_one(self, naca400, flow05, converged400):
        # forward-difference error of a smooth functional decays linearly,
        # so the measured directional derivative converges with slope one
        rng = np.random.default_rng(43)
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, INCONSISTENT).bound(flow05)
        g = qoi_gradient_analytic(naca400, converged400, recon, q)
        du = rng.standard_normal(converged400.shape)
        du *= np.abs(converged400) / np.abs(du).max()
        base = evaluate_qoi(naca400, converged400, recon, q)
        slope = float((g * du).sum())
        errs = []
        steps = [1e-3, 1e-4, 1e-5]
        for t in steps:
            bumped = converged400 + t * du
            rb = build_reconstruction(naca400, bumped, order=0)
            val = evaluate_qoi(naca400, bumped, rb, q)
            errs.append(abs((val - base) / t - slope))
        fit = np.polyfit(np.log(steps), np.log(errs), 1)[0]
        assert 0.8 <= fit <= 1.2

    def test_analytic_path_guards(self, naca400, flow05, converged400):
        r0 = build_reconstruction(naca400, converged400, order=0)
        r1 = build_reconstruction(naca400, converged400, order=1)
        qc = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        qi = QoiConfig(QOI_DRAG, INCONSISTENT).bound(flow05)
        with pytest.raises(ValueError, match="inconsistent"):
            qoi_gradient_analytic(naca400, converged400, r0, qc)
        with pytest.raises(ValueError, match="order-0"):
            qoi_gradient_analytic(naca400, converged400, r1, qi)


class TestDualSolve:
    def test_zero_gradient_gives_zero_dual(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, beta=np.zeros(2), c_inf=1.0)
        dual, trace = solve_dual(
            naca400, converged400, recon, q,
            NewtonSettings(residual_tol=1e-8), config=flow05,
        )
        assert dual.converged
        assert np.all(dual.z == 0.0)
        assert dual.total_cycles == 0
        assert trace.converged

    def test_matches_dense_transpose_solve(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        dual, trace = solve_dual(
            naca400, converged400, recon, q,
            NewtonSettings(residual_tol=1e-10), config=flow05,
        )
        assert dual.converged and trace.converged
        jac = assemble_jacobian(naca400, converged400, flow05)
        g = qoi_gradient(naca400, converged400, recon, q, config=flow05)
        zd = np.linalg.solve(jac.to_dense().T, g.ravel())
        assert np.abs(dual.z.ravel() - zd).max() <= 1e-8 * np.abs(zd).max()

    def test_adjoint_identity(self, naca400, flow05, converged400):
        rng = np.random.default_rng(47)
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_LIFT, CONSISTENT).bound(flow05)
        dual, _ = solve_dual(
            naca400, converged400, recon, q,
            NewtonSettings(residual_tol=1e-10), config=flow05,
        )
        jac = assemble_jacobian(naca400, converged400, flow05)
        g = qoi_gradient(naca400, converged400, recon, q, config=flow05).ravel()
        z = dual.z.ravel()
        for _ in range(20):
            w = rng.standard_normal(z.shape)
            lhs = z @ jac.matvec(w)
            rhs = g @ w
            assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-12)

    def test_weightings_agree(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        settings = NewtonSettings(residual_tol=1e-10)
        zp, _ = solve_dual(
            naca400, converged400, recon, q, settings, config=flow05,
        )
        zd, _ = solve_dual(
            naca400, converged400, recon, q, settings, config=flow05,
            weighting="dual_residual",
        )
        scale = np.abs(zp.z).max()
        assert np.abs(zp.z - zd.z).max() <= 1e-6 * scale

    def test_missing_config_rejected(self, naca400, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, beta=np.ones(2), c_inf=1.0)
        with pytest.raises(ValueError, match="config"):
            solve_dual(naca400, converged400, recon, q, NewtonSettings())

    def test_unknown_weighting_rejected(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG).bound(flow05)
        with pytest.raises(ValueError, match="weighting"):
            solve_dual(
                naca400, converged400, recon, q, NewtonSettings(),
                config=flow05, weighting="uniform",
            )

    def test_stalled_solve_raises_with_state(
        self, naca400, flow05, converged400
    ):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG).bound(flow05)
        settings = NewtonSettings(residual_tol=1e-14, max_newton_iters=0)
        with pytest.raises(SolverError) as err:
            solve_dual(
                naca400, converged400, recon, q, settings, config=flow05,
            )
        assert not err.value.state.converged
        assert len(err.value.trace.iters) == 1

    def test_gmg_histories_mostly_monotone(self, naca400, flow05, converged400):
        recon = build_reconstruction(naca400, converged400, order=0)
        q = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        dual, _ = solve_dual(
            naca400, converged400, recon, q,
            NewtonSettings(residual_tol=1e-10), config=flow05,
        )
        for hist in dual.gmg_histories:
            bad = sum(
                1 for a, b in zip(hist, hist[1:]) if b > a * (1.0 + 1e-12)
            )
            assert bad <= max(1, len(hist) // 10)


class TestDualSymmetry:
    @staticmethod
    def _pairing(mesh):
        c = mesh.cell_centroids
        key = {(round(x, 9), round(y, 9)): i for i, (x, y) in enumerate(c)}
        return np.array(
            [key[(round(x, 9), round(-y, 9))] for x, y in c], dtype=np.int64
        )

    @staticmethod
    def _parity_mismatch(z, pair):
        parity = np.array([1.0, 1.0, -1.0, 1.0])
        mism = np.abs(z - parity[None, :] * z[pair]).max(axis=0)
        return mism / np.maximum(np.abs(z).max(axis=0), 1e-300)

    def test_consistent_dual_has_mirror_parity(self, sym800, flow05):
        # drag at zero incidence on a mirror-symmetric mesh: the density,
        # x-momentum, and energy duals are even, the y-momentum dual odd
        mesh, u = sym800
        pair = self._pairing(mesh)
        recon = build_reconstruction(mesh, u, order=0)
        q = QoiConfig(QOI_DRAG, CONSISTENT).bound(flow05)
        dual, _ = solve_dual(
            mesh, u, recon, q, NewtonSettings(residual_tol=1e-10),
            config=flow05,
        )
        rel = self._parity_mismatch(dual.z, pair)
        assert np.all(rel <= 1e-6), rel

    def test_inconsistent_dual_parity_reported(self, sym800, flow05):
        # the contrast the adaptation studies draw is about smoothness near
        # the wall; on an exactly mirror-symmetric mesh the raw-trace
        # functional is still mirror-equivariant, so parity alone need not
        # break. Report the measured mismatch rather than asserting a fail.
        mesh, u = sym800
        pair = self._pairing(mesh)
        recon = build_reconstruction(mesh, u, order=0)
        q = QoiConfig(QOI_DRAG, INCONSISTENT).bound(flow05)
        dual, _ = solve_dual(
            mesh, u, recon, q, NewtonSettings(residual_tol=1e-10),
            config=flow05,
        )
        rel = self._parity_mismatch(dual.z, pair)
        assert np.all(np.isfinite(rel))
        print(f"inconsistent-mode parity mismatch per component: {rel}")
