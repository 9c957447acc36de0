"""Uniform model-backend abstraction shared by all pipeline stages.

All three stages must run against the same model instance: detection scores
reflect that model's knowledge gaps, the Q&A chain elicits that model's
beliefs, and training updates that model's weights. The descriptor's
instance_id (a content hash of kind + configuration) is recorded per stage
so reports can assert the same-model invariant.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import CapabilityError

KIND_TOY = "toy"
KIND_SCRIPTED = "scripted"
KIND_REMOTE = "remote"

CAP_SCORE = "score"
CAP_GENERATE = "generate"
CAP_EMBED = "embed"
CAP_TRAIN = "train"

_REQUIRED_CAPS = {
    KIND_TOY: {CAP_SCORE, CAP_GENERATE, CAP_EMBED, CAP_TRAIN},
    KIND_SCRIPTED: {CAP_SCORE, CAP_GENERATE},
    KIND_REMOTE: {CAP_SCORE, CAP_GENERATE},
}


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    capabilities: frozenset[str]
    tokenizer_id: str
    instance_id: str

    def __post_init__(self):
        if self.kind not in _REQUIRED_CAPS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        missing = _REQUIRED_CAPS[self.kind] - self.capabilities
        if missing:
            raise ValueError(f"{self.kind} backend must support {sorted(missing)}")
        if CAP_TRAIN in self.capabilities and self.kind != KIND_TOY:
            raise ValueError("train capability is exclusive to the toy backend")


def instance_id_for(kind: str, config: dict) -> str:
    digest = hashlib.sha1(
        json.dumps({"kind": kind, **config}, sort_keys=True).encode("utf-8")
    ).hexdigest()
    return f"{kind}-{digest[:12]}"


class Backend:
    """Base backend; operations raise CapabilityError unless overridden."""

    descriptor: BackendDescriptor
    context_length: int | None = None

    def supports(self, capability: str) -> bool:
        return capability in self.descriptor.capabilities

    def _unsupported(self, op: str) -> CapabilityError:
        return CapabilityError(f"{self.descriptor.kind} backend does not support {op}")

    # Tokenization. Toy and scripted backends tokenize locally (bytes); the
    # remote backend's tokenizer lives server-side.
    def tokenize(self, text: str) -> list[int]:
        raise self._unsupported("local tokenization")

    def detokenize(self, token_ids: Sequence[int]) -> str:
        raise self._unsupported("local tokenization")

    def token_strings(self, text: str) -> list[str]:
        """Token surface strings whose concatenation is the text."""
        raise self._unsupported("local tokenization")

    # Scoring.
    def score(self, token_ids: Sequence[int]) -> list[float]:
        """Per-token logprobs of the ids; position 0 is scored against start-of-sequence."""
        raise self._unsupported("score")

    def score_text(self, text: str) -> list[float]:
        return self.score(self.tokenize(text))

    def score_tokens(self, text: str) -> tuple[list[str], list[float]]:
        """(token strings, per-token logprobs) for the text."""
        return self.token_strings(text), self.score_text(text)

    # Generation.
    def generate(self, prompt: str, temperature: float = 0.0, max_tokens: int = 256) -> str:
        raise self._unsupported("generate")

    # Embeddings.
    def embed(self, text: str) -> np.ndarray:
        raise self._unsupported("embed")

    # Training (toy only).
    def train_step(self, token_ids: Sequence[int], hook: Callable) -> float:
        raise self._unsupported("train")


def token_overlap_embedding(text: str, dim: int = 64) -> np.ndarray:
    """Normalized hashed bag-of-tokens vector; the embed fallback for backends
    that expose no hidden states. Deterministic across processes."""
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        digest = hashlib.sha1(token.encode("utf-8")).hexdigest()
        vec[int(digest[:8], 16) % dim] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec
