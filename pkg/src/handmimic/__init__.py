"""Human-to-robot hand retargeting: models, optimization, fusion, streaming."""

from .fusion import (
    FusionConfig,
    KeypointCandidate,
    KeypointFuser,
    MlpWeights,
    geometric_median,
    load_mlp_weights,
    mlp_forward,
    save_mlp_weights,
)
from .geometry import Pose
from .hand_model import (
    HandModel,
    JointVector,
    ModelError,
    ModelSemanticError,
    ModelSyntaxError,
    clamp_to_limits,
    forward_kinematics,
    load_model,
    parse_model,
    serialize_model,
    task_vector,
)
from .messages import (
    HandshakeMessage,
    HandStateMessage,
    RobotCommandMessage,
    WireError,
    decode_message,
    encode_message,
)
from .pipeline import (
    FullConfig,
    PipelineSettings,
    RunReport,
    load_full_config,
    run_replay,
    save_full_config,
    serve,
)
from .retarget import (
    RetargetConfig,
    SolveState,
    classify_vectors,
    default_config,
    load_config,
    save_config,
    solve_retarget,
)

__version__ = "0.1.0"

__all__ = [
    "Pose",
    "HandModel",
    "JointVector",
    "ModelError",
    "ModelSemanticError",
    "ModelSyntaxError",
    "clamp_to_limits",
    "forward_kinematics",
    "load_model",
    "parse_model",
    "serialize_model",
    "task_vector",
    "RetargetConfig",
    "SolveState",
    "classify_vectors",
    "default_config",
    "load_config",
    "save_config",
    "solve_retarget",
    "FusionConfig",
    "KeypointCandidate",
    "KeypointFuser",
    "MlpWeights",
    "geometric_median",
    "load_mlp_weights",
    "mlp_forward",
    "save_mlp_weights",
    "HandStateMessage",
    "RobotCommandMessage",
    "HandshakeMessage",
    "WireError",
    "decode_message",
    "encode_message",
    "FullConfig",
    "PipelineSettings",
    "RunReport",
    "load_full_config",
    "run_replay",
    "save_full_config",
    "serve",
    "__version__",
]
