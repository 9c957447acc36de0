"""Model backends: trainable toy transformer, scripted replay, remote HTTP."""

from .base import (
    Backend,
    BackendDescriptor,
    CAP_EMBED,
    CAP_GENERATE,
    CAP_SCORE,
    CAP_TRAIN,
    KIND_REMOTE,
    KIND_SCRIPTED,
    KIND_TOY,
    token_overlap_embedding,
)
from .remote import RemoteBackend
from .scripted import ScriptedBackend, prompt_key
from .toy import ToyBackend
from .transformer import ToyModelConfig

__all__ = [
    "Backend",
    "BackendDescriptor",
    "CAP_EMBED",
    "CAP_GENERATE",
    "CAP_SCORE",
    "CAP_TRAIN",
    "KIND_REMOTE",
    "KIND_SCRIPTED",
    "KIND_TOY",
    "RemoteBackend",
    "ScriptedBackend",
    "ToyBackend",
    "ToyModelConfig",
    "prompt_key",
    "token_overlap_embedding",
]
