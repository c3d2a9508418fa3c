"""Low-loss path finding between independently trained neural-network modes."""

__version__ = "0.1.0"

from .param_space import (
    EPS_VAR,
    DegenerateVariance,
    LayerStats,
    LayoutMismatch,
    ParamVector,
    SliceInfo,
    VarianceTarget,
    arc_length,
    l2_distance,
    layer_stats,
    radial_norm_sq,
    variance_correction,
    zeros_like,
)
from .llpf_core import (
    CrossVarianceConfig,
    M2OConfig,
    PathPoint,
    PathRecord,
    Phase,
    PhasePlan,
    PrerequisiteError,
    SearchSettings,
    StepParams,
    angle_conformal,
    connect_cross_variance,
    fdf_phase_plan,
    llpf_m2m,
    llpf_m2o,
    move_toward,
)
from .analysis import (
    ContinuityReport,
    SeedStudyTable,
    aggregate_records,
    interpolation_continuity,
    path_metrics,
    rolling_average,
    seed_variance_study,
)

__all__ = [
    "EPS_VAR",
    "ContinuityReport",
    "CrossVarianceConfig",
    "DegenerateVariance",
    "LayerStats",
    "LayoutMismatch",
    "M2OConfig",
    "ParamVector",
    "PathPoint",
    "PathRecord",
    "Phase",
    "PhasePlan",
    "PrerequisiteError",
    "SearchSettings",
    "SeedStudyTable",
    "SliceInfo",
    "StepParams",
    "VarianceTarget",
    "aggregate_records",
    "angle_conformal",
    "arc_length",
    "connect_cross_variance",
    "fdf_phase_plan",
    "interpolation_continuity",
    "l2_distance",
    "layer_stats",
    "llpf_m2m",
    "llpf_m2o",
    "move_toward",
    "path_metrics",
    "radial_norm_sq",
    "rolling_average",
    "seed_variance_study",
    "variance_correction",
    "zeros_like",
]
