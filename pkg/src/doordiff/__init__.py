"""Planar door-opening simulation, diffusion planning, and force-safety benchmarking."""

from doordiff.world import (
    SceneConfig,
    DoorState,
    ForceSample,
    StepResult,
    handle_position,
    handle_tangent,
    decompose_force,
    step,
    oracle_plan,
    check_success,
)
from doordiff.diffusion import (
    ConditionBundle,
    DiffusionConfig,
    DiffusionPlanner,
    Normalizer,
    StatePlan,
    make_schedule,
    nominal_arc,
    q_sample,
    train,
)
from doordiff.dataset import (
    DatasetManifest,
    Demonstration,
    NoiseLevels,
    Observation,
    ObservationStream,
    SceneRanges,
    fit_normalizer,
    generate_demo,
    generate_demos,
    observe,
    read_dataset,
    sample_scene,
    sample_scene_pool,
    write_dataset,
)
from doordiff.runtime import (
    DiffusionPolicy,
    DisturbanceSpec,
    EpisodeTrace,
    OraclePlanner,
    PlanRequest,
    PlannerFailure,
    evaluate_fleet,
    inverse_dynamics,
    read_trace,
    rollout,
    write_trace,
)
from doordiff.metrics import (
    MetricReport,
    average_harmful_force,
    build_report,
    report_csv,
    report_text,
    safety_rates,
    success_rate,
)

__version__ = "0.1.0"
