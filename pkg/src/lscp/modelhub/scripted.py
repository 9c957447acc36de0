"""Replayable lookup-table backend for exact, model-free pipeline tests.

Script format (dict or JSON file):

    {
      "generate": {"<prompt or sha256(prompt)>": "response", ...},
      "score": {"<text or sha256(text)>": [logprob, ...], ...},
      "default_logprob": -2.77,          # optional uniform table fallback
      "embed_dim": 64                     # optional
    }

Lookups try the raw string first, then its sha256 hex digest. In strict mode
(default) a missing key is an error; this keeps Stage 2 tests byte-exact.
Embeddings fall back to normalized token-overlap vectors so the grounding
store stays functional without a model.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import BackendError
from .base import (
    Backend,
    BackendDescriptor,
    CAP_EMBED,
    CAP_GENERATE,
    CAP_SCORE,
    KIND_SCRIPTED,
    instance_id_for,
    token_overlap_embedding,
)


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ScriptedBackend(Backend):
    def __init__(self, script: dict | str | Path, strict: bool = True):
        if not isinstance(script, dict):
            with open(script, encoding="utf-8") as fh:
                script = json.load(fh)
        self.script = script
        self.strict = strict
        self.embed_dim = int(script.get("embed_dim", 64))
        self.default_logprob = script.get("default_logprob")
        self.context_length = None
        self.calls: list[tuple[str, str, dict]] = []
        self.descriptor = BackendDescriptor(
            kind=KIND_SCRIPTED,
            capabilities=frozenset({CAP_SCORE, CAP_GENERATE, CAP_EMBED}),
            tokenizer_id="bytes-v1",
            instance_id=instance_id_for(
                KIND_SCRIPTED,
                {"digest": hashlib.sha1(json.dumps(script, sort_keys=True).encode()).hexdigest()},
            ),
        )

    def _lookup(self, table: str, key: str):
        mapping = self.script.get(table, {})
        if key in mapping:
            return mapping[key]
        hashed = prompt_key(key)
        if hashed in mapping:
            return mapping[hashed]
        return None

    # -- tokenization -------------------------------------------------------
    def tokenize(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return bytes(int(t) for t in token_ids).decode("utf-8", errors="replace")

    def token_strings(self, text: str) -> list[str]:
        return [bytes([b]).decode("latin-1") for b in text.encode("utf-8")]

    # -- scoring ------------------------------------------------------------
    def score(self, token_ids: Sequence[int]) -> list[float]:
        if len(token_ids) == 0:
            raise ValueError("empty document")
        if self.default_logprob is None:
            raise BackendError("scripted backend has no default_logprob for id scoring")
        return [float(self.default_logprob)] * len(token_ids)

    def score_text(self, text: str) -> list[float]:
        entry = self._lookup("score", text)
        if entry is not None:
            return [float(lp) for lp in entry]
        if self.default_logprob is not None:
            return [float(self.default_logprob)] * len(self.tokenize(text))
        if self.strict:
            raise BackendError(f"scripted backend missing score entry for {text[:60]!r}")
        return [0.0] * len(self.tokenize(text))

    def score_tokens(self, text: str) -> tuple[list[str], list[float]]:
        strings = self.token_strings(text)
        scores = self.score_text(text)
        if len(scores) != len(strings):
            # Per-text tables may be coarser than byte tokens; spread evenly.
            scores = list(np.interp(np.linspace(0, 1, len(strings)), np.linspace(0, 1, len(scores)), scores))
        return strings, scores

    # -- generation ---------------------------------------------------------
    def generate(self, prompt: str, temperature: float = 0.0, max_tokens: int = 256) -> str:
        self.calls.append(("generate", prompt, {"temperature": temperature, "max_tokens": max_tokens}))
        entry = self._lookup("generate", prompt)
        if entry is None:
            if self.strict:
                raise BackendError(f"scripted backend missing generate entry for {prompt[:60]!r}")
            return ""
        return entry

    # -- embeddings ---------------------------------------------------------
    def embed(self, text: str) -> np.ndarray:
        entry = self._lookup("embed", text)
        if entry is not None:
            return np.asarray(entry, dtype=np.float64)
        return token_overlap_embedding(text, self.embed_dim)
