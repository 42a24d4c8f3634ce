"""Permutation-protected transformer inference: engine, key transform,
three-party protocol, and security analysis tools."""

__version__ = "0.1.0"

from .errors import (
    AbortedGenerationError,
    CodecError,
    DegenerateRowError,
    InsufficientSamplesError,
    InvalidConfigError,
    InvalidDimensionError,
    KeyspaceTooLargeError,
    MissingWeightError,
    NotInitializedError,
    ProtocolError,
    StaleEpochError,
    StipError,
    TransportError,
    UnknownTokenError,
)
from .model import (
    EmbeddingTable,
    FfnKind,
    LayerWeights,
    Mask,
    MaskKind,
    ModelConfig,
    ModelParams,
    NormKind,
    NormPlacement,
    gen_model,
    greedy_generate,
    model_forward,
)
from .numerics import Permutation, gen_permutation, inverse_perm
from .protocol import DataOwnerParty, DeveloperParty, ServerParty, run_simulation
from .security import (
    bfa_exhaustive,
    dcorr_baseline_projection,
    distance_correlation,
    feature_distance_correlation,
    keyspace_log_size,
    kpa_column_match,
    kpa_parameter_resistance_demo,
    unauthorized_use_demo,
)
from .transform import (
    PermutationSet,
    TransformedModel,
    gen_permutation_set,
    para_trans,
    recover_output,
    verify_equivalence,
)

__all__ = [
    "__version__",
    "StipError",
    "InvalidDimensionError",
    "InvalidConfigError",
    "DegenerateRowError",
    "UnknownTokenError",
    "MissingWeightError",
    "CodecError",
    "ProtocolError",
    "StaleEpochError",
    "NotInitializedError",
    "TransportError",
    "AbortedGenerationError",
    "InsufficientSamplesError",
    "KeyspaceTooLargeError",
    "Permutation",
    "gen_permutation",
    "inverse_perm",
    "ModelConfig",
    "ModelParams",
    "LayerWeights",
    "EmbeddingTable",
    "Mask",
    "NormKind",
    "NormPlacement",
    "FfnKind",
    "MaskKind",
    "gen_model",
    "model_forward",
    "greedy_generate",
    "PermutationSet",
    "TransformedModel",
    "gen_permutation_set",
    "para_trans",
    "recover_output",
    "verify_equivalence",
    "DeveloperParty",
    "ServerParty",
    "DataOwnerParty",
    "run_simulation",
    "distance_correlation",
    "feature_distance_correlation",
    "dcorr_baseline_projection",
    "keyspace_log_size",
    "bfa_exhaustive",
    "kpa_column_match",
    "kpa_parameter_resistance_demo",
    "unauthorized_use_demo",
]
