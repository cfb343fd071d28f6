"""Risk-aware traffic interaction graphs.

Builds parameterized spatio-temporal interaction graphs over road agents,
trains a graph convolutional classifier for ego driving behavior, and
identifies risk objects by causal intervention (node masking), all on a
synthetic ground-truth-labeled scenario generator or externally extracted
feature files.
"""

from .estimator import BehaviorClassifier, check_scenario_list, infer_class_names
from .exceptions import (
    ConfigError,
    EvaluationError,
    GenerationError,
    ModelFormatError,
    NumericError,
    ScenarioFormatError,
    TrafficGcnError,
    TrainingDivergedError,
    UnknownAgentError,
)
from .generator import GeneratorConfig, derive_ground_truth, generate_dataset, generate_scenario
from .geometry import (
    CameraIntrinsics,
    PixelObservation,
    Point3,
    euclidean_distance,
    inverse_project,
    invert_intrinsics,
    project,
    within_range,
)
from .graph import (
    AdjacencyTensor,
    EdgeParams,
    NodeSet,
    adjacency_from_relations,
    appearance_relation,
    build_adjacency,
    build_adjacency_frame,
    distance_gate,
    ego_interaction_profile,
    fourier_map,
    node_set_from_scenario,
    positional_relation,
)
from .model import (
    GradCheckReport,
    ModelConfig,
    ModelParams,
    OptimizerState,
    TrainConfig,
    adam_step,
    backward,
    evaluate,
    forward,
    forward_detailed,
    grad_check,
    init_params,
    load_model,
    loss,
    save_model,
    spatial_conv,
    temporal_conv,
    train,
)
from .risk import (
    RecallResult,
    RiskReport,
    evaluate_recall,
    group_risk_score,
    identify_risk_group,
    predict_behavior,
    risk_scores,
)
from .scenario import (
    AgentClass,
    AgentFrameState,
    DatasetManifest,
    Scenario,
    ScenarioAgent,
    Tracklet,
    fuse_context,
    load_manifest,
    load_scenario,
    load_split,
    mask_agent,
    mask_group,
    save_manifest,
    save_scenario,
)

__version__ = "0.1.0"
