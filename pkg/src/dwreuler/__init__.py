"""Adjoint-based adaptive finite-volume solver for steady 2D Euler flow."""

from .adjoint import (
    CONSISTENT,
    INCONSISTENT,
    QOI_DRAG,
    QOI_LIFT,
    DualField,
    QoiConfig,
    evaluate_forces,
    evaluate_qoi,
    qoi_gradient,
    solve_dual,
)
from .assembly import (
    BlockMatrix,
    assemble_jacobian,
    assemble_residual,
)
from .dwr import (
    DUAL_ON_FINE,
    DUAL_PROLONGED_CORRECTED,
    AdaptationRecord,
    IndicatorField,
    ThresholdSchedule,
    adapt_loop,
    corrected_estimate,
    duality_gap,
    embed_and_residual,
    indicators,
)
from .gasdynamics import (
    GAMMA,
    WALL_MIRROR,
    WALL_PROJECTION,
    FlowConfig,
    InadmissibleStateError,
    get_flux,
    lax_friedrichs,
    vijayasundaram,
)
from .mesh import (
    FARFIELD,
    INTERIOR,
    WALL,
    Mesh,
    MeshError,
    agglomerate,
    build_mesh,
    generate_airfoil_mesh,
    prolong_solution,
    read_mesh,
    refine_cells,
    uniform_refine,
    write_mesh,
)
from .solver import (
    REG_LOCAL_TIME,
    REG_RESIDUAL_SCALED,
    ConvergenceTrace,
    NewtonSettings,
    SolverError,
    build_hierarchy,
    gmg_solve,
    newton_solve,
    regularize,
)

__version__ = "0.1.0"

__all__ = [
    "CONSISTENT",
    "INCONSISTENT",
    "QOI_DRAG",
    "QOI_LIFT",
    "DualField",
    "QoiConfig",
    "evaluate_forces",
    "evaluate_qoi",
    "qoi_gradient",
    "solve_dual",
    "DUAL_ON_FINE",
    "DUAL_PROLONGED_CORRECTED",
    "AdaptationRecord",
    "IndicatorField",
    "ThresholdSchedule",
    "adapt_loop",
    "corrected_estimate",
    "duality_gap",
    "embed_and_residual",
    "indicators",
    "BlockMatrix",
    "assemble_jacobian",
    "assemble_residual",
    "GAMMA",
    "WALL_MIRROR",
    "WALL_PROJECTION",
    "FlowConfig",
    "InadmissibleStateError",
    "get_flux",
    "lax_friedrichs",
    "vijayasundaram",
    "FARFIELD",
    "INTERIOR",
    "WALL",
    "Mesh",
    "MeshError",
    "agglomerate",
    "build_mesh",
    "generate_airfoil_mesh",
    "prolong_solution",
    "read_mesh",
    "refine_cells",
    "uniform_refine",
    "write_mesh",
    "REG_LOCAL_TIME",
    "REG_RESIDUAL_SCALED",
    "ConvergenceTrace",
    "NewtonSettings",
    "SolverError",
    "build_hierarchy",
    "gmg_solve",
    "newton_solve",
    "regularize",
    "__version__",
]
