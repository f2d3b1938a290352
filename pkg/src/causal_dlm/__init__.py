"""Causal-attention masked diffusion language modeling at desk scale."""

__version__ = "0.1.0"

from .decode import (  # noqa: E402
    DecodeConfig,
    DecodeStats,
    ar_greedy_decode,
    blockwise_decode,
    commit_equivalence_check,
    compute_pcache,
    select_by_entropy,
    streaming_decode,
)
from .model import (  # noqa: E402
    ForwardBatch,
    KvCache,
    ModelConfig,
    Parameters,
    VisibilitySpec,
    forward,
    init_params,
    sample_token,
    softmax_entropy,
)

__all__ = [
    "DecodeConfig",
    "DecodeStats",
    "ForwardBatch",
    "KvCache",
    "ModelConfig",
    "Parameters",
    "VisibilitySpec",
    "ar_greedy_decode",
    "blockwise_decode",
    "commit_equivalence_check",
    "compute_pcache",
    "forward",
    "init_params",
    "sample_token",
    "select_by_entropy",
    "softmax_entropy",
    "streaming_decode",
]
