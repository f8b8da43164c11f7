from .base import (
    AttentionRecord,
    KIND_GLOBAL_ABLATE,
    KIND_GLOBAL_SRC,
    KIND_REGION_ABLATE,
    KIND_REGION_SRC,
    KIND_SINGLE,
    Oracle,
    OracleCapabilities,
    OracleResponse,
    PromptKind,
    RequestKey,
    VisualInput,
    build_single_token_input,
    grid_visual_input,
)
from .analytic import AnalyticOracle, background_direction, class_directions
from .toy import PROMPT_TOKEN_IDS, ToyTransformerOracle, ToyWeights, init_toy_weights, toy_forward
from .replay import (
    RecordingOracle,
    ReplayOracle,
    ReplayStore,
    build_request_records,
    replay_lookup,
    write_replay_store,
)

__all__ = [
    "AttentionRecord",
    "KIND_GLOBAL_ABLATE",
    "KIND_GLOBAL_SRC",
    "KIND_REGION_ABLATE",
    "KIND_REGION_SRC",
    "KIND_SINGLE",
    "Oracle",
    "OracleCapabilities",
    "OracleResponse",
    "PromptKind",
    "RequestKey",
    "VisualInput",
    "build_single_token_input",
    "grid_visual_input",
    "AnalyticOracle",
    "background_direction",
    "class_directions",
    "PROMPT_TOKEN_IDS",
    "ToyTransformerOracle",
    "ToyWeights",
    "init_toy_weights",
    "toy_forward",
    "RecordingOracle",
    "ReplayOracle",
    "ReplayStore",
    "build_request_records",
    "replay_lookup",
    "write_replay_store",
]
