"""Trainable desk-scale backend around the numpy transformer.

Byte-level tokenization (UTF-8 bytes, so the vocab needs no external assets),
deterministic given the config seed. The only backend with the train
capability: train_step computes loss and gradients, hands them to the
optimizer hook exactly once, and parameters change only through that hook.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..errors import BackendError
from . import tensorfile
from .base import (
    Backend,
    BackendDescriptor,
    CAP_EMBED,
    CAP_GENERATE,
    CAP_SCORE,
    CAP_TRAIN,
    KIND_TOY,
    instance_id_for,
)
from .transformer import (
    ToyModelConfig,
    final_hidden,
    init_params,
    loss_and_grads,
    next_token_logprobs,
    sequence_logprobs,
)


class ToyBackend(Backend):
    def __init__(self, config: ToyModelConfig | None = None, params: dict | None = None):
        self.config = config or ToyModelConfig()
        self.params = params if params is not None else init_params(self.config)
        self.context_length = self.config.context_length
        self.descriptor = BackendDescriptor(
            kind=KIND_TOY,
            capabilities=frozenset({CAP_SCORE, CAP_GENERATE, CAP_EMBED, CAP_TRAIN}),
            tokenizer_id="bytes-v1",
            instance_id=instance_id_for(KIND_TOY, self.config.to_dict()),
        )
        # Sampling RNG; advances per generate call, reproducible across runs.
        self._sample_rng = np.random.default_rng(self.config.seed + 0x5EED)

    # -- tokenization -------------------------------------------------------
    def tokenize(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return bytes(int(t) for t in token_ids).decode("utf-8", errors="replace")

    def token_strings(self, text: str) -> list[str]:
        # One string per byte (latin-1 is bijective over bytes); for ASCII text
        # the strings tile the original exactly.
        return [bytes([b]).decode("latin-1") for b in text.encode("utf-8")]

    def _check_context(self, n_tokens: int) -> None:
        if n_tokens > self.config.context_length:
            raise ValueError("context exceeded")

    # -- scoring ------------------------------------------------------------
    def score(self, token_ids: Sequence[int]) -> list[float]:
        if len(token_ids) == 0:
            raise ValueError("empty document")
        self._check_context(len(token_ids))
        return [float(lp) for lp in sequence_logprobs(self.params, self.config, token_ids)]

    def next_token_logprobs(self, prefix_ids: Sequence[int]) -> np.ndarray:
        self._check_context(len(prefix_ids) + 1)
        return next_token_logprobs(self.params, self.config, prefix_ids)

    # -- generation ---------------------------------------------------------
    def generate_ids(
        self, prompt_ids: Sequence[int], temperature: float = 0.0, max_tokens: int = 256
    ) -> list[int]:
        ids = list(prompt_ids)
        self._check_context(len(ids) + 1)
        new_ids: list[int] = []
        for _ in range(max_tokens):
            if len(ids) + 1 > self.config.context_length:
                break
            logp = next_token_logprobs(self.params, self.config, ids)
            if temperature <= 0.0:
                token = int(np.argmax(logp))
            else:
                scaled = logp / temperature
                scaled -= scaled.max()
                probs = np.exp(scaled)
                probs /= probs.sum()
                token = int(self._sample_rng.choice(len(probs), p=probs))
            ids.append(token)
            new_ids.append(token)
        return new_ids

    def generate(self, prompt: str, temperature: float = 0.0, max_tokens: int = 256) -> str:
        return self.detokenize(self.generate_ids(self.tokenize(prompt), temperature, max_tokens))

    # -- embeddings ---------------------------------------------------------
    def embed(self, text: str) -> np.ndarray:
        ids = self.tokenize(text)
        if not ids:
            raise ValueError("empty document")
        self._check_context(len(ids))
        return final_hidden(self.params, self.config, ids).mean(axis=0)

    # -- training -----------------------------------------------------------
    def train_step(self, token_ids: Sequence[int], hook: Callable) -> float:
        """Loss (mean surprisal) of the item; gradients go to the hook once."""
        if len(token_ids) == 0:
            raise ValueError("empty document")
        self._check_context(len(token_ids))
        loss, grads = loss_and_grads(self.params, self.config, token_ids)
        if not np.isfinite(loss):
            raise BackendError("non-finite loss; no update applied")
        hook(self.params, grads)
        return loss

    # -- persistence --------------------------------------------------------
    def save_checkpoint(self, path: str | Path) -> None:
        tensorfile.save_tensors(path, self.params, extra={"config": self.config.to_dict()})

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> "ToyBackend":
        tensors, extra = tensorfile.load_tensors(path)
        config = ToyModelConfig.from_dict(extra["config"])
        return cls(config=config, params=tensors)
