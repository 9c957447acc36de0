"""Surprisal-gated continual learning pipeline.

Detect passages the model finds surprising via per-token surprisal, verify
them through a self-generated tagged Q&A chain, and consolidate verified
content into weights with an AdamW whose beta2 is gated per item by
conviction depth: beta2 = 0.999 * r**k.
"""

from .config import PipelineConfig, load_config
from .errors import (
    BackendError,
    CapabilityError,
    ChainGenerationError,
    ConfigError,
    LscpError,
    RetryableBackendError,
    StageError,
)

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "LscpError",
    "ConfigError",
    "StageError",
    "CapabilityError",
    "BackendError",
    "RetryableBackendError",
    "ChainGenerationError",
    "__version__",
]
