"""moesim: scheduling library and discrete-event simulator for hybrid
GPU-CPU mixture-of-experts inference.

The package models expert routing traces, cache placement policies,
per-sequence reallocation, predictive pre-calculation, and prices four decode
engines (on-demand migration, predictive prefetch, CPU offload, and offload
with pre-calculation) on a three-resource timeline.
"""

from ._kernels import BACKEND as kernel_backend
from .errors import (
    BudgetError,
    ConfigError,
    EmptyPhaseError,
    GeneratorTargetError,
    MoesimError,
    NormalizationError,
    PredictionMissingError,
    ShapeMismatchError,
    TooShortSequenceError,
    TraceParseError,
)
from .generator import (
    GeneratorConfig,
    default_profile,
    generate_many,
    generate_trace,
    profile_for_mean,
    ramp_profile,
)
from .metrics import (
    ActivationMatrix,
    activation_matrix,
    expert_counts,
    mean_prediction_accuracy,
    metrics_report,
    prediction_accuracy,
    routing_fidelity,
    row_cosines,
    similarity,
    window_drift,
)
from .placement import (
    ExpertPlacement,
    SwapEvent,
    allocate_for_sequence,
    init_from_calibration,
    slot_budget_for_ecr,
)
from .policies import (
    ENGINES,
    Degradation,
    ExecutedExpert,
    LayerPlan,
    PolicyConfig,
    degrade_selection,
    make_planner,
    plan_token_daop,
    plan_token_fiddler,
    plan_token_ondemand,
    plan_token_prefetch,
    plan_trace_decode,
)
from .simulator import (
    CostModel,
    Event,
    TimelineResult,
    check_no_overlap,
    default_cost_model,
    simulate_decode,
    simulate_prefill,
)
from .trace import (
    MIXTRAL_SHAPE,
    PHI_SHAPE,
    ModelShape,
    RoutingTrace,
    TokenRouting,
    load_trace,
    parse_shape,
    save_trace,
)
from .experiment import ExperimentSpec, compare, run, run_single

__version__ = "0.1.0"

__all__ = [
    "ActivationMatrix",
    "BudgetError",
    "ConfigError",
    "CostModel",
    "Degradation",
    "EmptyPhaseError",
    "ENGINES",
    "Event",
    "ExecutedExpert",
    "ExperimentSpec",
    "ExpertPlacement",
    "GeneratorConfig",
    "GeneratorTargetError",
    "LayerPlan",
    "MIXTRAL_SHAPE",
    "ModelShape",
    "MoesimError",
    "NormalizationError",
    "PHI_SHAPE",
    "PolicyConfig",
    "PredictionMissingError",
    "RoutingTrace",
    "ShapeMismatchError",
    "SwapEvent",
    "TimelineResult",
    "TokenRouting",
    "TooShortSequenceError",
    "TraceParseError",
    "activation_matrix",
    "allocate_for_sequence",
    "check_no_overlap",
    "compare",
    "default_cost_model",
    "default_profile",
    "degrade_selection",
    "expert_counts",
    "generate_many",
    "generate_trace",
    "init_from_calibration",
    "kernel_backend",
    "load_trace",
    "make_planner",
    "mean_prediction_accuracy",
    "metrics_report",
    "parse_shape",
    "plan_token_daop",
    "plan_token_fiddler",
    "plan_token_ondemand",
    "plan_token_prefetch",
    "plan_trace_decode",
    "prediction_accuracy",
    "profile_for_mean",
    "ramp_profile",
    "routing_fidelity",
    "row_cosines",
    "run",
    "run_single",
    "save_trace",
    "similarity",
    "simulate_decode",
    "simulate_prefill",
    "slot_budget_for_ecr",
    "window_drift",
]
