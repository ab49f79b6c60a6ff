"""Markerless motion capture for two closely interacting people.

Synthetic multi-camera scenes are tracked with a forecast / gate /
triangulate / refine loop and then fitted with a capsule body model whose
objective includes an inter-person collision term. The package is organized
by pipeline stage:

``geometry``
    pinhole cameras, rigs, projection, Procrustes alignment.
``body``
    capsule body template, forward kinematics with analytic adjoints,
    surface sampling, signed distance, OBJ export.
``simulate``
    two-person interaction scenarios and ground-truth scene synthesis.
``observe``
    detection corruption and gated identity association.
``forecast``
    constant-velocity Kalman filtering per keypoint.
``triangulate``
    DLT and RANSAC triangulation, temporal refinement.
``meshfit``
    staged body-model fitting with the collision objective.
``metrics``
    MPJPE / PVE / PCK / F1 / contact metric suite.
``pipeline``
    scene-level orchestration, evaluation, and ablations.
``cli``
    the ``duocap`` command.
"""

from .body import (
    SHAPE_DIM,
    BodyError,
    BodyParams,
    BodyTemplate,
    SubjectMotion,
    default_template,
    export_obj,
    forward_kinematics,
    identity_params,
    motion_keypoints,
    signed_distance,
    surface_vertices,
)
from .forecast import FilterTuning, ForecastError, KeypointFilter, TrackedSubject
from .geometry import (
    BehindCameraError,
    CameraRig,
    CameraView,
    DegenerateInputError,
    GeometryError,
    procrustes_align,
    project,
    project_points,
)
from .meshfit import (
    FitResult,
    MeshFitError,
    MeshFitWeights,
    ShapePrior,
    StagePlan,
    extract_contacts,
    fit_sequence,
    penetration_series,
)
from .metrics import (
    MetricsReport,
    collision_scores,
    detection_scores,
    joint_errors,
    pck_and_auc,
    vertex_errors,
)
from .observe import (
    Detections2D,
    ObservationError,
    ObservationModel,
    gate_associate,
    synth_detect,
)
from .pipeline import (
    PipelineConfig,
    PipelineError,
    PipelineResult,
    Scene,
    SceneError,
    TrackResult,
    ablate_cameras,
    ablate_collision,
    evaluate_result,
    evaluate_sequences,
    load_config,
    load_scene,
    run_pipeline,
    save_config,
    save_scene,
    synthesize_scene,
    track_scene,
)
from .simulate import SCENARIO_KINDS, Scenario, ScenarioError, make_rig, make_scenario
from .triangulate import (
    Pose3DSequence,
    RefineWeights,
    TriangulationConfig,
    TriangulationError,
    dlt_triangulate,
    ransac_triangulate,
    refine_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "SHAPE_DIM",
    "SCENARIO_KINDS",
    "BehindCameraError",
    "BodyError",
    "BodyParams",
    "BodyTemplate",
    "CameraRig",
    "CameraView",
    "DegenerateInputError",
    "Detections2D",
    "FilterTuning",
    "FitResult",
    "ForecastError",
    "GeometryError",
    "KeypointFilter",
    "MeshFitError",
    "MeshFitWeights",
    "MetricsReport",
    "ObservationError",
    "ObservationModel",
    "PipelineConfig",
    "PipelineError",
    "PipelineResult",
    "Pose3DSequence",
    "RefineWeights",
    "Scenario",
    "ScenarioError",
    "Scene",
    "SceneError",
    "ShapePrior",
    "StagePlan",
    "SubjectMotion",
    "TrackResult",
    "TrackedSubject",
    "TriangulationConfig",
    "TriangulationError",
    "ablate_cameras",
    "ablate_collision",
    "collision_scores",
    "default_template",
    "detection_scores",
    "dlt_triangulate",
    "evaluate_result",
    "evaluate_sequences",
    "export_obj",
    "extract_contacts",
    "fit_sequence",
    "forward_kinematics",
    "gate_associate",
    "identity_params",
    "joint_errors",
    "load_config",
    "load_scene",
    "make_rig",
    "make_scenario",
    "motion_keypoints",
    "pck_and_auc",
    "penetration_series",
    "procrustes_align",
    "project",
    "project_points",
    "ransac_triangulate",
    "refine_sequence",
    "run_pipeline",
    "save_config",
    "save_scene",
    "signed_distance",
    "surface_vertices",
    "synth_detect",
    "synthesize_scene",
    "track_scene",
    "vertex_errors",
    "__version__",
]
