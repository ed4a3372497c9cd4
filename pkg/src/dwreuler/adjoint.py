"""Drag and lift functionals and the discrete adjoint solve.

The functionals integrate wall pressure against a force direction.  Two
evaluation modes exist: the consistent mode reads the pressure off the
boundary-modified state that also feeds the wall flux, the inconsistent
mode reads it off the raw reconstructed trace.  Both share the same
Jacobian; they differ only in the functional and its gradient, which is
what makes the dual solves comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .gasdynamics import (
    GAMMA,
    WALL_MIRROR,
    WALL_PROJECTION,
    FlowConfig,
    lax_friedrichs,
    pressure,
    project_wall,
    reflect_mirror,
)
from .assembly import assemble_jacobian, assemble_residual
from .reconstruction import Reconstruction, _stencils, build_reconstruction
from .solver import (
    REG_RESIDUAL_SCALED,
    ConvergenceTrace,
    NewtonSettings,
    SolverError,
    build_hierarchy,
    default_agglomeration,
    regularize,
    solve_with_fallback,
)

QOI_DRAG = "drag"
QOI_LIFT = "lift"

CONSISTENT = "consistent"
INCONSISTENT = "inconsistent"

WEIGHT_PRIMAL_RESIDUAL = "primal_residual"
WEIGHT_DUAL_RESIDUAL = "dual_residual"


@dataclass(frozen=True)
class QoiConfig:
    """A force coefficient: which component, how the wall pressure is read,
    and the direction/normalization it is integrated against.

    ``beta`` and ``c_inf`` are derived from the flow state via :meth:`bound`;
    constructing them by hand is only useful in tests.
    """

    kind: str = QOI_DRAG
    consistency_mode: str = CONSISTENT
    beta: Optional[np.ndarray] = None
    c_inf: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (QOI_DRAG, QOI_LIFT):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.consistency_mode not in (CONSISTENT, INCONSISTENT):
            raise ValueError(
                f"unknown consistency mode {self.consistency_mode!r}"
            )
        if self.beta is not None:
            object.__setattr__(
                self, "beta", np.asarray(self.beta, dtype=float).reshape(2)
            )
        if self.c_inf is not None and not self.c_inf > 0.0:
            raise ValueError("force normalization must be positive")

    def bound(self, config: FlowConfig) -> "QoiConfig":
        """Fill in the force direction and normalization for a flow state."""
        a = np.deg2rad(config.aoa_deg)
        if self.kind == QOI_DRAG:
            direction = np.array([np.cos(a), np.sin(a)])
        else:
            direction = np.array([-np.sin(a), np.cos(a)])
        # the unscaled direction is a unit vector by construction; guard it
        # anyway so a future edit cannot silently skew the coefficient
        assert abs(np.hypot(*direction) - 1.0) < 1e-14
        c_inf = config.force_normalization()
        if not c_inf > 0.0:
            raise ValueError("force normalization must be positive")
        return QoiConfig(
            kind=self.kind,
            consistency_mode=self.consistency_mode,
            beta=direction / c_inf,
            c_inf=c_inf,
        )


@dataclass
class DualField:
    """Converged dual variables plus how the solve went."""

    z: np.ndarray
    converged: bool
    final_residual: float
    outer_iterations: int
    total_cycles: int
    gmg_histories: list = dataclass_field(default_factory=list)


def _require_bound(qoi: QoiConfig, config: Optional[FlowConfig]) -> QoiConfig:
    if qoi.beta is not None and qoi.c_inf is not None:
        return qoi
    if config is None:
        raise ValueError(
            "QoiConfig has no direction bound; pass config= or bind it first"
        )
    return qoi.bound(config)


def _wall_traces(mesh, recon: Reconstruction, wall):
    left, _ = recon.edge_traces()
    return left[wall]


def _wall_pressures(traces, normals, consistency_mode, wall_mode, gamma):
    """Pressure read at each wall edge under the requested mode.

    One row per edge.  The consistent mode evaluates the pressure of the
    same modified state the wall flux sees; mirroring preserves pressure,
    so under the mirror wall the two modes coincide identically.
    """
    if consistency_mode == INCONSISTENT:
        return pressure(traces, gamma)
    if wall_mode == WALL_PROJECTION:
        return pressure(project_wall(traces, normals), gamma)
    if wall_mode == WALL_MIRROR:
        return pressure(reflect_mirror(traces, normals), gamma)
    raise ValueError(f"unknown wall mode {wall_mode!r}")


def evaluate_forces(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    wall_mode: str = WALL_PROJECTION,
    gamma: float = GAMMA,
    consistency_mode: str = CONSISTENT,
):
    """Integrate the wall pressure once and return the raw force vector.

    Midpoint rule per wall edge: F = sum p~ * n * length.  Both drag and
    lift are projections of this single vector, so computing them together
    costs one boundary sweep.
    """
    wall = mesh.wall_edges()
    if len(wall) == 0:
        raise ValueError("mesh has no wall edges to integrate over")
    field = np.asarray(field, dtype=float)
    if field.shape != recon.field.shape or not np.array_equal(
        field, recon.field
    ):
        raise ValueError("field does not match the reconstruction it came with")
    traces = _wall_traces(mesh, recon, wall)
    if np.any(traces[:, 0] <= 0.0):
        raise ValueError("nonpositive density in a wall trace")
    normals = mesh.edge_normals[wall]
    p = _wall_pressures(traces, normals, consistency_mode, wall_mode, gamma)
    if np.any(p <= 0.0):
        raise ValueError("nonpositive pressure in a wall trace")
    w = p * mesh.edge_lengths[wall]
    return normals.T @ w


def evaluate_qoi(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    qoi: QoiConfig,
    wall_mode: str = WALL_PROJECTION,
    gamma: float = GAMMA,
    config: Optional[FlowConfig] = None,
) -> float:
    """Drag or lift coefficient of ``field`` under the functional's mode."""
    qoi = _require_bound(qoi, config)
    force = evaluate_forces(
        mesh, field, recon, wall_mode, gamma, qoi.consistency_mode
    )
    return float(force @ qoi.beta)


def _floored_steps(values, ref, eps0):
    """Forward-difference steps matching the Jacobian assembly convention:
    relative to the entry, floored to the reference scale where the entry
    is tiny, and signed like the entry."""
    steps = eps0 * np.abs(values)
    floor = np.abs(values) < 1e-3 * ref
    steps = np.where(floor, eps0 * ref, steps)
    return np.where(values < 0.0, -steps, steps)


def qoi_gradient(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    qoi: QoiConfig,
    wall_mode: str = WALL_PROJECTION,
    gamma: float = GAMMA,
    eps0: float = 1e-8,
    config: Optional[FlowConfig] = None,
) -> np.ndarray:
    """dJ/du by forward differences, nonzero only on wall-stencil cells.

    With order-0 traces the functional touches each wall cell only through
    its own average, so the sweep differentiates the edge pressures
    directly; higher-order traces fall back to re-evaluating the functional
    with the reconstruction rebuilt per perturbed entry.
    """
    qoi = _require_bound(qoi, config)
    wall = mesh.wall_edges()
    if len(wall) == 0:
        raise ValueError("mesh has no wall edges to integrate over")
    field = np.asarray(field, dtype=float)
    g = np.zeros_like(field)
    ref = np.maximum(np.abs(field).max(axis=0), 1e-12)
    normals = mesh.edge_normals[wall]
    weights = (normals @ qoi.beta) * mesh.edge_lengths[wall]
    owners = mesh.edge_cells[wall, 0]

    if recon.order == 0:
        traces = field[owners]
        p0 = _wall_pressures(
            traces, normals, qoi.consistency_mode, wall_mode, gamma
        )
        for k in range(4):
            steps = _floored_steps(traces[:, k], ref[k], eps0)
            bumped = traces.copy()
            bumped[:, k] += steps
            pk = _wall_pressures(
                bumped, normals, qoi.consistency_mode, wall_mode, gamma
            )
            np.add.at(g[:, k], owners, weights * (pk - p0) / steps)
        return g

    base = evaluate_qoi(mesh, field, recon, qoi, wall_mode, gamma)
    involved = set(owners.tolist())
    indptr, indices = _stencils(mesh)
    for j in owners:
        involved.update(indices[indptr[j] : indptr[j + 1]].tolist())
    for j in sorted(involved):
        for k in range(4):
            step = _floored_steps(field[j : j + 1, k], ref[k], eps0)[0]
            bumped = field.copy()
            bumped[j, k] += step
            r = build_reconstruction(
                mesh, bumped, order=recon.order, limit=recon.limiter is not None
            )
            g[j, k] = (
                evaluate_qoi(mesh, bumped, r, qoi, wall_mode, gamma) - base
            ) / step
    return g


def qoi_gradient_analytic(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    qoi: QoiConfig,
    gamma: float = GAMMA,
    config: Optional[FlowConfig] = None,
) -> np.ndarray:
    """Exact dJ/du for the inconsistent functional with order-0 traces.

    The raw-trace pressure depends on the owning cell's average alone, so
    the chain rule is a single dp/du row per wall edge.  Kept as a
    cross-check oracle for the finite-difference path.
    """
    qoi = _require_bound(qoi, config)
    if qoi.consistency_mode != INCONSISTENT:
        raise ValueError(
            "analytic gradient covers the inconsistent functional only"
        )
    if recon.order != 0:
        raise ValueError("analytic gradient requires order-0 traces")
    wall = mesh.wall_edges()
    if len(wall) == 0:
        raise ValueError("mesh has no wall edges to integrate over")
    field = np.asarray(field, dtype=float)
    owners = mesh.edge_cells[wall, 0]
    u = field[owners]
    normals = mesh.edge_normals[wall]
    weights = (normals @ qoi.beta) * mesh.edge_lengths[wall]

    rho = u[:, 0]
    vx = u[:, 1] / rho
    vy = u[:, 2] / rho
    dp = np.empty_like(u)
    dp[:, 0] = 0.5 * (vx * vx + vy * vy)
    dp[:, 1] = -vx
    dp[:, 2] = -vy
    dp[:, 3] = 1.0
    dp *= gamma - 1.0

    g = np.zeros_like(field)
    np.add.at(g, owners, weights[:, None] * dp)
    return g


def dual_residual(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    qoi: QoiConfig,
    z: np.ndarray,
    flux=lax_friedrichs,
    wall_mode: str = WALL_PROJECTION,
    config: Optional[FlowConfig] = None,
) -> np.ndarray:
    """Residual of the dual problem at ``z``: (dR/du)^T z - dJ/du.

    Zero exactly at the converged dual; the duality-gap estimate pairs it
    with the primal error.
    """
    if config is None:
        raise ValueError("dual_residual requires the flow configuration")
    qoi = _require_bound(qoi, config)
    jac = assemble_jacobian(mesh, field, config, flux=flux, wall_mode=wall_mode)
    g = qoi_gradient(
        mesh, field, recon, qoi, wall_mode, config.gamma, config=config
    )
    z = np.asarray(z, dtype=float).reshape(-1, 4)
    if z.shape[0] != mesh.n_cells:
        raise ValueError("dual vector does not match the mesh")
    return jac.transpose().matvec(z) - g


def solve_dual(
    mesh,
    field: np.ndarray,
    recon: Reconstruction,
    qoi: QoiConfig,
    settings: NewtonSettings,
    flux=lax_friedrichs,
    wall_mode: str = WALL_PROJECTION,
    config: Optional[FlowConfig] = None,
    weighting: str = WEIGHT_PRIMAL_RESIDUAL,
    agglomeration=None,
    z0: Optional[np.ndarray] = None,
):
    """Solve the transposed linearization for the dual variables.

    The Jacobian is assembled at ``field`` (wall rows carry the configured
    boundary modification in both modes), transposed, and shifted by a
    nonnegative diagonal before each multigrid solve; corrections are
    applied until the relative dual residual meets ``settings.residual_tol``.
    The default shift weights by the primal residual, which vanishes on a
    converged primal so the correction loop collapses to one or two passes;
    ``dual_residual`` weighting refreshes the shift from the current dual
    residual instead.

    Returns ``(DualField, ConvergenceTrace)``.  The trace records one row
    per correction pass with the relative dual residual in the residual
    column.  ``z0`` warm-starts the correction loop (used by the adaptive
    loop to seed a fine-mesh dual with the prolonged coarse one).
    """
    if config is None:
        raise ValueError("solve_dual requires the flow configuration")
    if weighting not in (WEIGHT_PRIMAL_RESIDUAL, WEIGHT_DUAL_RESIDUAL):
        raise ValueError(f"unknown weighting {weighting!r}")
    qoi = _require_bound(qoi, config)
    field = np.asarray(field, dtype=float)

    jac = assemble_jacobian(mesh, field, config, flux=flux, wall_mode=wall_mode)
    jac_t = jac.transpose()
    g = qoi_gradient(
        mesh, field, recon, qoi, wall_mode, config.gamma, config=config
    )

    trace = ConvergenceTrace()
    g_norm = float(np.abs(g).sum())
    if z0 is None:
        z = np.zeros_like(g)
    else:
        z = np.array(z0, dtype=float).reshape(g.shape)
    if g_norm == 0.0:
        trace.append(0, 0.0, float("nan"), 0.0, 0)
        trace.converged = True
        dual = DualField(
            z=np.zeros_like(g),
            converged=True,
            final_residual=0.0,
            outer_iterations=0,
            total_cycles=0,
        )
        return dual, trace

    if agglomeration is None:
        agglomeration = default_agglomeration(mesh, settings)
    primal_res = assemble_residual(
        mesh, field, config, order=0, flux=flux, wall_mode=wall_mode
    )

    prebuilt = None
    if weighting == WEIGHT_PRIMAL_RESIDUAL:
        shifted = regularize(
            jac_t, primal_res, settings.alpha, REG_RESIDUAL_SCALED,
            global_weight=settings.global_weight,
        )
        prebuilt = (
            shifted,
            build_hierarchy(
                shifted, agglomeration,
                pre_sweeps=settings.pre_sweeps,
                post_sweeps=settings.post_sweeps,
            ),
        )

    total_cycles = 0
    histories = []
    converged = False
    rel = float("inf")
    lin_level = 0
    for it in range(settings.max_newton_iters + 1):
        r = g - jac_t.matvec(z)
        rel = float(np.abs(r).sum()) / g_norm
        if rel <= settings.residual_tol:
            trace.append(it, rel, float("nan"), 0.0, 0)
            converged = True
            break
        if it == settings.max_newton_iters:
            trace.append(it, rel, float("nan"), 0.0, 0)
            break

        # aim one pass at the target when the shift is negligible; the
        # shifted operator otherwise controls the outer contraction rate
        lin_tol = max(1e-13, min(1e-2, 0.3 * settings.residual_tol / rel))
        weights = primal_res if weighting == WEIGHT_PRIMAL_RESIDUAL else r
        try:
            dz, info, lin_level = solve_with_fallback(
                jac_t,
                r,
                weights,
                settings.alpha,
                REG_RESIDUAL_SCALED,
                mesh,
                field,
                None,
                settings.global_weight,
                agglomeration,
                settings.pre_sweeps,
                settings.post_sweeps,
                lin_tol,
                settings.max_cycles,
                start_level=lin_level,
                prebuilt=prebuilt,
            )
        except SolverError as err:
            err.trace = trace  # type: ignore[attr-defined]
            raise
        total_cycles += info.cycles
        histories.append(info.history)
        trace.append(it, rel, float("nan"), settings.damping, info.cycles)
        z += settings.damping * dz

    trace.converged = converged
    dual = DualField(
        z=z,
        converged=converged,
        final_residual=rel,
        outer_iterations=len(trace.iters),
        total_cycles=total_cycles,
        gmg_histories=histories,
    )
    if not converged:
        err = SolverError(
            f"dual solve stalled at relative residual {rel:.3e}"
        )
        err.trace = trace  # type: ignore[attr-defined]
        err.state = dual  # type: ignore[attr-defined]
        raise err
    return dual, trace
