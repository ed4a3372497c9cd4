"""Dual-weighted residual estimation and the adaptive refinement loop.

The machinery pairs the residual of the embedded coarse solution on a
uniformly refined mesh with a dual weight.  Two weights are supported:
the dual solved directly on the fine mesh, and the economical corrected
weight built from the coarse dual (reconstructed prolongation minus
injection), which costs no fine-mesh dual solve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from .gasdynamics import (
    WALL_PROJECTION,
    FlowConfig,
    is_admissible,
    lax_friedrichs,
)
from .assembly import assemble_residual
from .mesh import Mesh, MeshError, prolong_solution, refine_cells, uniform_refine
from .reconstruction import Reconstruction, build_reconstruction
from .solver import NewtonSettings, SolverError, newton_solve
from .adjoint import DualField, QoiConfig, evaluate_qoi, solve_dual

DUAL_ON_FINE = "dual_on_fine"
DUAL_PROLONGED_CORRECTED = "dual_prolonged_corrected"

Z_SOURCES = (DUAL_ON_FINE, DUAL_PROLONGED_CORRECTED)


@dataclass
class IndicatorField:
    """Per-cell error indicators and the signed correction they sum to."""

    eta: np.ndarray  # (n_fine,) nonnegative
    coarse: np.ndarray  # (n_coarse,) sums over children
    total: float
    signed_correction: float  # <dual weight, R_h>, feeds the corrected QoI
    z_source: str

    def __post_init__(self):
        if np.any(self.eta < 0.0):
            raise ValueError("indicators must be nonnegative")
        if not np.isfinite(self.signed_correction):
            raise ValueError("signed correction must be finite")


@dataclass(frozen=True)
class ThresholdSchedule:
    """Decreasing marking thresholds plus the loop's stopping budget.

    The cycle-c threshold is ``initial * decay**c`` floored at
    ``min_threshold``, where ``initial`` is either the absolute value given
    or ``initial_fraction`` of the largest coarse-aggregated indicator of
    the first cycle.
    """

    initial_fraction: float = 0.1
    initial_absolute: Optional[float] = None
    decay: float = 0.5
    min_threshold: float = 0.0
    max_cycles: int = 6
    max_cells: int = 200_000

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie strictly between 0 and 1")
        if self.initial_absolute is None and not self.initial_fraction > 0.0:
            raise ValueError("initial fraction must be positive")
        if self.initial_absolute is not None and not self.initial_absolute > 0.0:
            raise ValueError("initial threshold must be positive")
        if self.min_threshold < 0.0:
            raise ValueError("minimum threshold must be nonnegative")
        if self.max_cycles < 0:
            raise ValueError("cycle budget must be nonnegative")
        if self.max_cells <= 0:
            raise ValueError("cell budget must be positive")

    def threshold(self, cycle: int, initial: float) -> float:
        return max(self.min_threshold, initial * self.decay**cycle)


def _require_uniform_child(coarse_mesh: Mesh, fine_mesh: Mesh):
    """Reject fine meshes that are not the one-level uniform refinement of
    the given coarse mesh."""
    if fine_mesh.parent_cell is None:
        raise MeshError("fine mesh carries no refinement lineage")
    nc = coarse_mesh.n_cells
    if fine_mesh.n_cells != 4 * nc or not np.array_equal(
        fine_mesh.parent_cell, np.repeat(np.arange(nc), 4)
    ):
        raise MeshError("fine mesh is not a one-level uniform refinement")
    nv = coarse_mesh.n_vertices
    if fine_mesh.n_vertices <= nv or not np.array_equal(
        fine_mesh.vertices[:nv], coarse_mesh.vertices
    ):
        raise MeshError("fine mesh does not descend from this coarse mesh")


def embed_and_residual(
    coarse_mesh: Mesh,
    coarse_field: np.ndarray,
    fine_mesh: Mesh,
    config: Optional[FlowConfig] = None,
    flux=lax_friedrichs,
    wall_mode: str = WALL_PROJECTION,
):
    """Prolong the coarse solution and record its fine-mesh residual.

    The transfer reconstructs first (limited linear representation) and
    evaluates at child centroids; the residual uses order-1 traces on the
    fine mesh.  Returns ``(u_fine, R_h)``.
    """
    if config is None:
        raise ValueError("embed_and_residual requires the flow configuration")
    _require_uniform_child(coarse_mesh, fine_mesh)
    coarse_field = np.asarray(coarse_field, dtype=float)
    if coarse_field.shape != (coarse_mesh.n_cells, 4):
        raise ValueError("field does not match the coarse mesh")
    recon = build_reconstruction(coarse_mesh, coarse_field, order=1)
    embedded = prolong_solution(coarse_field, fine_mesh, recon)
    # limited reconstruction can still overshoot at child centroids next to
    # strong gradients; fall back to injection where positivity is lost
    bad = ~is_admissible(embedded, config.gamma)
    if np.any(bad):
        embedded[bad] = coarse_field[fine_mesh.parent_cell[bad]]
    residual = assemble_residual(
        fine_mesh, embedded, config, order=1, flux=flux, wall_mode=wall_mode
    )
    return embedded, residual


def _dual_weights(
    z_source: str,
    dual: DualField,
    recon: Optional[Reconstruction],
    fine_mesh: Mesh,
):
    """Estimate weight and indicator weight per fine cell for a mode.

    DUAL_ON_FINE uses the fine-mesh dual for both.  The corrected mode
    prolongs the coarse dual two ways, linearly and by injection; their
    difference drives the indicators while the linear transfer weights the
    corrected functional estimate.
    """
    if z_source not in Z_SOURCES:
        raise ValueError(f"unknown dual weight source {z_source!r}")
    z = np.asarray(dual.z, dtype=float)
    if z_source == DUAL_ON_FINE:
        if z.shape != (fine_mesh.n_cells, 4):
            raise ValueError("fine-mesh mode needs a dual on the fine mesh")
        return z, z
    if fine_mesh.parent_cell is None:
        raise MeshError("fine mesh carries no refinement lineage")
    if z.shape != (int(fine_mesh.parent_cell.max()) + 1, 4):
        raise ValueError("corrected mode needs the dual on the parent mesh")
    if recon is None:
        raise ValueError("corrected mode needs the coarse dual reconstruction")
    if recon.field.shape != z.shape or not np.array_equal(recon.field, z):
        raise ValueError("reconstruction does not represent the dual field")
    linear = prolong_solution(z, fine_mesh, recon)
    injected = prolong_solution(z, fine_mesh, None)
    return linear, linear - injected


def indicators(
    z_source: str,
    dual: DualField,
    residual: np.ndarray,
    recon: Optional[Reconstruction],
    fine_mesh: Mesh,
) -> IndicatorField:
    """Dual-weighted residual indicators per fine cell, aggregated to the
    parents that the marking step acts on."""
    residual = np.asarray(residual, dtype=float)
    if residual.shape != (fine_mesh.n_cells, 4):
        raise ValueError("residual does not match the fine mesh")
    weight_est, weight_ind = _dual_weights(z_source, dual, recon, fine_mesh)
    signed = (weight_ind * residual).sum(axis=1)
    eta = np.abs(signed)
    n_coarse = (
        fine_mesh.n_cells // 4
        if fine_mesh.parent_cell is None
        else int(fine_mesh.parent_cell.max()) + 1
    )
    coarse = np.zeros(n_coarse)
    np.add.at(coarse, fine_mesh.parent_cell, eta)
    return IndicatorField(
        eta=eta,
        coarse=coarse,
        total=float(eta.sum()),
        signed_correction=float((weight_est * residual).sum()),
        z_source=z_source,
    )


def corrected_estimate(
    j_coarse_on_fine: float,
    z_weight: np.ndarray,
    residual: np.ndarray,
    mode: str,
):
    """Functional estimate corrected by the dual-weighted residual.

    The fine functional of the embedded field, minus the weighted residual:
    exact for linear problems.  Returns ``(estimate, correction)`` with
    ``correction = estimate - j_coarse_on_fine`` kept for reporting.
    """
    if mode not in Z_SOURCES:
        raise ValueError(f"unknown dual weight source {mode!r}")
    z_weight = np.asarray(z_weight, dtype=float)
    residual = np.asarray(residual, dtype=float)
    if z_weight.shape != residual.shape:
        raise ValueError("weight and residual shapes disagree")
    correction = -float((z_weight * residual).sum())
    return j_coarse_on_fine + correction, correction


def duality_gap(
    z_fine: np.ndarray,
    z_prolonged: np.ndarray,
    residual: np.ndarray,
    rz_of_prolonged: np.ndarray,
    u_fine: np.ndarray,
    u_embedded: np.ndarray,
) -> float:
    """Mismatch between the primal-weighted and dual-weighted error views.

    (z_fine - z_prolonged)^T R_h - (R^z(z_prolonged))^T (u_fine - u_embedded);
    zero for linear problems, quadratic in the error magnitudes otherwise.
    """
    arrays = [
        np.asarray(a, dtype=float)
        for a in (z_fine, z_prolonged, residual, rz_of_prolonged, u_fine, u_embedded)
    ]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays[1:]):
        raise ValueError("duality gap needs all fields on the same fine mesh")
    zf, zp, rh, rz, uf, ue = arrays
    return float(((zf - zp) * rh).sum() - (rz * (uf - ue)).sum())


@dataclass
class CycleRow:
    """One line of the adaptation record."""

    cycle: int
    cells: int
    qoi: float
    corrected_estimate: float
    indicator_sum: float
    threshold: float
    primal_res: float
    dual_res: float


@dataclass
class CycleState:
    """Fields kept per cycle so later analysis can reuse the solves."""

    mesh: Mesh
    field: np.ndarray
    dual_z: Optional[np.ndarray]
    eta_coarse: Optional[np.ndarray]
    marked: Optional[np.ndarray]


@dataclass
class AdaptationRecord:
    """Outcome of the adaptive loop: per-cycle rows plus failure marking."""

    rows: list = dataclass_field(default_factory=list)
    states: list = dataclass_field(default_factory=list)
    failed_cycle: Optional[int] = None
    failure_message: str = ""
    budget_exhausted: bool = False

    @property
    def converged_cells(self):
        return [row.cells for row in self.rows]

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            if self.failed_cycle is not None:
                fh.write(
                    f"# FAILED at cycle {self.failed_cycle}: "
                    f"{self.failure_message}\n"
                )
            w = csv.writer(fh)
            w.writerow(
                [
                    "cycle",
                    "cells",
                    "qoi",
                    "corrected_estimate",
                    "indicator_sum",
                    "threshold",
                    "primal_res",
                    "dual_res",
                ]
            )
            for r in self.rows:
                w.writerow(
                    [
                        r.cycle,
                        r.cells,
                        f"{r.qoi:.16e}",
                        f"{r.corrected_estimate:.16e}",
                        f"{r.indicator_sum:.16e}",
                        f"{r.threshold:.16e}",
                        f"{r.primal_res:.16e}",
                        f"{r.dual_res:.16e}",
                    ]
                )


def _sanitized_prolongation(mesh, field, fine_mesh, gamma):
    """Reconstructed transfer with injection fallback where positivity
    would be lost; keeps warm starts admissible."""
    recon = build_reconstruction(mesh, field, order=1)
    out = prolong_solution(field, fine_mesh, recon)
    bad = ~is_admissible(out, gamma)
    if np.any(bad):
        out[bad] = field[fine_mesh.parent_cell[bad]]
    return out


def adapt_loop(
    initial_mesh: Mesh,
    config: FlowConfig,
    qoi: QoiConfig,
    schedule: ThresholdSchedule,
    consistency_mode: Optional[str] = None,
    *,
    z_source: str = DUAL_PROLONGED_CORRECTED,
    newton_settings: Optional[NewtonSettings] = None,
    dual_settings: Optional[NewtonSettings] = None,
    flux=lax_friedrichs,
    wall_mode: str = WALL_PROJECTION,
    initial_field: Optional[np.ndarray] = None,
    keep_fields: bool = True,
    on_cycle: Optional[Callable] = None,
) -> AdaptationRecord:
    """One-step adaptive refinement driven by dual-weighted indicators.

    Every cycle solves the primal, embeds it into the uniform refinement,
    records the fine residual, solves the dual (on the fine mesh for
    DUAL_ON_FINE, on the coarse mesh otherwise), aggregates indicators to
    parents, and refines the cells above the cycle's threshold.  The loop
    ends when the cycle or cell budget runs out; solver failures abort it
    and mark the failed cycle on the returned record.
    """
    if z_source not in Z_SOURCES:
        raise ValueError(f"unknown dual weight source {z_source!r}")
    if consistency_mode is not None:
        qoi = QoiConfig(
            kind=qoi.kind,
            consistency_mode=consistency_mode,
            beta=qoi.beta,
            c_inf=qoi.c_inf,
        )
    qoi = qoi.bound(config) if qoi.beta is None or qoi.c_inf is None else qoi
    newton_settings = newton_settings or NewtonSettings(residual_tol=1e-10)
    dual_settings = dual_settings or NewtonSettings(residual_tol=1e-8)

    record = AdaptationRecord()
    mesh = initial_mesh
    if initial_field is None:
        u = np.tile(config.freestream(), (mesh.n_cells, 1))
    else:
        u = np.asarray(initial_field, dtype=float)
    initial_threshold = (
        None if schedule.initial_absolute is None else schedule.initial_absolute
    )

    for cycle in range(schedule.max_cycles + 1):
        qoi_val = float("nan")
        estimate = float("nan")
        ind_total = float("nan")
        thr = float("nan")
        primal_res = float("nan")
        dual_res = float("nan")
        ind = None
        coarse_dual = None
        marked = None
        try:
            u, ptrace = newton_solve(
                mesh, u, newton_settings,
                flux=flux, wall_mode=wall_mode, config=config,
            )
            primal_res = ptrace.residual_l1[-1]
            if not ptrace.converged:
                raise SolverError(
                    f"primal solve stalled at residual {primal_res:.3e}"
                )
            recon1 = build_reconstruction(mesh, u, order=1)
            qoi_val = evaluate_qoi(
                mesh, u, recon1, qoi, wall_mode, config.gamma
            )

            fine = uniform_refine(mesh, 1)
            embedded, residual = embed_and_residual(
                mesh, u, fine, config=config, flux=flux, wall_mode=wall_mode
            )
            fine_recon1 = build_reconstruction(fine, embedded, order=1)
            j_fine_embedded = evaluate_qoi(
                fine, embedded, fine_recon1, qoi, wall_mode, config.gamma
            )

            recon0 = build_reconstruction(mesh, u, order=0)
            coarse_dual, _ = solve_dual(
                mesh, u, recon0, qoi, dual_settings,
                flux=flux, wall_mode=wall_mode, config=config,
            )
            if z_source == DUAL_ON_FINE:
                fine_recon0 = build_reconstruction(fine, embedded, order=0)
                fine_dual, _ = solve_dual(
                    fine, embedded, fine_recon0, qoi, dual_settings,
                    flux=flux, wall_mode=wall_mode, config=config,
                    z0=prolong_solution(coarse_dual.z, fine, None),
                )
                dual_res = fine_dual.final_residual
                weight_dual = fine_dual
                weight_recon = None
            else:
                dual_res = coarse_dual.final_residual
                weight_dual = coarse_dual
                weight_recon = build_reconstruction(
                    mesh, coarse_dual.z, order=1
                )
            ind = indicators(z_source, weight_dual, residual, weight_recon, fine)
            ind_total = ind.total
            estimate = j_fine_embedded - ind.signed_correction

            if initial_threshold is None:
                peak = float(ind.coarse.max())
                if peak <= 0.0:
                    peak = 1.0
                initial_threshold = schedule.initial_fraction * peak
            thr = schedule.threshold(cycle, initial_threshold)
            marked = np.flatnonzero(ind.coarse > thr)
        except SolverError as err:
            record.failed_cycle = cycle
            record.failure_message = str(err)

        record.rows.append(
            CycleRow(
                cycle=cycle,
                cells=mesh.n_cells,
                qoi=qoi_val,
                corrected_estimate=estimate,
                indicator_sum=ind_total,
                threshold=thr,
                primal_res=primal_res,
                dual_res=dual_res,
            )
        )
        if keep_fields:
            record.states.append(
                CycleState(
                    mesh=mesh,
                    field=u,
                    dual_z=None if coarse_dual is None else coarse_dual.z,
                    eta_coarse=None if ind is None else ind.coarse,
                    marked=marked,
                )
            )
        if on_cycle is not None:
            on_cycle(record.rows[-1], record.states[-1] if keep_fields else None)

        if record.failed_cycle is not None or cycle == schedule.max_cycles:
            break
        if marked is None or len(marked) == 0:
            continue
        # red split triples the marked cells before closure; stop rather
        # than blow through the cell budget
        if mesh.n_cells + 3 * len(marked) > schedule.max_cells:
            record.budget_exhausted = True
            break
        refined = refine_cells(mesh, marked)
        u = _sanitized_prolongation(mesh, u, refined, config.gamma)
        mesh = refined

    return record
