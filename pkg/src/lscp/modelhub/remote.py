"""OpenAI-compatible chat-completions client backend.

Speaks the de facto wire protocol of local and hosted inference servers:
POST {base_url}/chat/completions with model, messages, temperature,
max_tokens, logprobs. Endpoint and auth come from arguments or the
LSCP_REMOTE_URL / LSCP_REMOTE_KEY environment variables.

Per-token logprob availability varies across servers. When a response
carries no logprobs, surprisal scoring raises CapabilityError rather than
approximating, and the CLI reports that plainly.
"""

from __future__ import annotations

import os
import time
from typing import Sequence

import requests

from ..errors import BackendError, CapabilityError, ConfigError, RetryableBackendError
from .base import (
    Backend,
    BackendDescriptor,
    CAP_GENERATE,
    CAP_SCORE,
    KIND_REMOTE,
    instance_id_for,
)

ENV_URL = "LSCP_REMOTE_URL"
ENV_KEY = "LSCP_REMOTE_KEY"


class RemoteBackend(Backend):
    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "default",
        timeout_s: float = 60.0,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.base_url = (base_url or os.environ.get(ENV_URL, "")).rstrip("/")
        if not self.base_url:
            raise ConfigError(f"remote backend needs a base URL (flag or {ENV_URL})")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY)
        self.model = model
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.session = session or requests.Session()
        self.context_length = None
        self.descriptor = BackendDescriptor(
            kind=KIND_REMOTE,
            capabilities=frozenset({CAP_SCORE, CAP_GENERATE}),
            tokenizer_id=f"remote:{model}",
            instance_id=instance_id_for(KIND_REMOTE, {"url": self.base_url, "model": model}),
        )

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, payload: dict) -> dict:
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                response = self.session.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout_s
                )
            except requests.RequestException as exc:
                last_error = exc
                time.sleep(self.backoff_s * 2**attempt)
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = RetryableBackendError(f"HTTP {response.status_code}: {response.text[:200]}")
                time.sleep(self.backoff_s * 2**attempt)
                continue
            if response.status_code >= 400:
                raise BackendError(f"HTTP {response.status_code}: {response.text[:500]}")
            return response.json()
        raise RetryableBackendError(f"remote request failed after {self.max_retries} attempts: {last_error}")

    # -- generation ---------------------------------------------------------
    def generate(self, prompt: str, temperature: float = 0.0, max_tokens: int = 256) -> str:
        data = self._post(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": temperature,
                "max_tokens": max_tokens,
            }
        )
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat-completions response: {exc}") from exc

    # -- scoring ------------------------------------------------------------
    def _score_response(self, text: str) -> list[dict]:
        data = self._post(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": text}],
                "temperature": 0.0,
                "max_tokens": 0,
                "logprobs": True,
                "echo": True,
            }
        )
        try:
            content = data["choices"][0]["logprobs"]["content"]
        except (KeyError, IndexError, TypeError):
            content = None
        if not content:
            raise CapabilityError(
                "remote backend returned no per-token logprobs; surprisal scoring is unavailable on this server"
            )
        return content

    def score_text(self, text: str) -> list[float]:
        return [float(entry["logprob"]) for entry in self._score_response(text)]

    def score_tokens(self, text: str) -> tuple[list[str], list[float]]:
        content = self._score_response(text)
        return (
            [str(entry.get("token", "")) for entry in content],
            [float(entry["logprob"]) for entry in content],
        )

    def score(self, token_ids: Sequence[int]) -> list[float]:
        raise CapabilityError("remote backend scores text, not local token ids")
