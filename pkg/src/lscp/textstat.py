"""Per-token surprisal, windowed passage surprisal, reference statistics, flagging.

Surprisal is measured in nats throughout; perplexity uses base e to match.
All functions here are pure and safe to call from concurrent workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from statistics import fmean
from typing import Iterable, NamedTuple, Sequence

# Backends may emit logprobs a hair above zero from float round-off; anything
# beyond this is a genuinely invalid distribution.
_LOGPROB_SLACK = 1e-9


def window_bounds(n_tokens: int, window_size: int) -> list[tuple[int, int]]:
    """Token index ranges [start, end) of each passage window.

    Full windows of ``window_size`` tokens; a trailing partial window is kept
    as its own passage iff it has at least window_size/2 tokens, otherwise it
    is merged into the previous window. A document shorter than half a window
    is a single passage.
    """
    if n_tokens <= 0:
        raise ValueError("empty document")
    if window_size <= 0:
        raise ValueError("invalid window")
    n_full, rem = divmod(n_tokens, window_size)
    bounds = [(i * window_size, (i + 1) * window_size) for i in range(n_full)]
    if rem:
        if 2 * rem >= window_size:
            bounds.append((n_full * window_size, n_tokens))
        elif bounds:
            start, _ = bounds[-1]
            bounds[-1] = (start, n_tokens)
        else:
            bounds = [(0, n_tokens)]
    return bounds


@dataclass(frozen=True)
class SurprisalProfile:
    """Per-token surprisal of one document plus its windowed passage means."""

    doc_id: str
    token_surprisals: tuple[float, ...]
    window_size: int
    passage_surprisals: tuple[float, ...]

    def passage_bounds(self) -> list[tuple[int, int]]:
        return window_bounds(len(self.token_surprisals), self.window_size)

    def passage_token_surprisals(self, passage_index: int) -> tuple[float, ...]:
        start, end = self.passage_bounds()[passage_index]
        return self.token_surprisals[start:end]

    def mean_surprisal(self) -> float:
        return fmean(self.passage_surprisals)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "window_size": self.window_size,
            "token_surprisals": list(self.token_surprisals),
            "passage_surprisals": list(self.passage_surprisals),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SurprisalProfile":
        return cls(
            doc_id=payload["doc_id"],
            token_surprisals=tuple(float(s) for s in payload["token_surprisals"]),
            window_size=int(payload["window_size"]),
            passage_surprisals=tuple(float(s) for s in payload["passage_surprisals"]),
        )


def surprisal_profile(
    token_logprobs: Sequence[float], window_size: int, doc_id: str = "doc"
) -> SurprisalProfile:
    """Turn per-token logprobs (all <= 0) into a windowed surprisal profile."""
    if len(token_logprobs) == 0:
        raise ValueError("empty document")
    if window_size <= 0:
        raise ValueError("invalid window")
    for lp in token_logprobs:
        if lp > _LOGPROB_SLACK:
            raise ValueError(f"positive logprob {lp!r}: not a valid distribution")
    surprisals = tuple(max(0.0, -float(lp)) for lp in token_logprobs)
    passages = tuple(
        fmean(surprisals[start:end])
        for start, end in window_bounds(len(surprisals), window_size)
    )
    return SurprisalProfile(
        doc_id=doc_id,
        token_surprisals=surprisals,
        window_size=window_size,
        passage_surprisals=passages,
    )


@dataclass(frozen=True)
class ReferenceStats:
    """Reference-corpus surprisal statistics and the flagging threshold."""

    mu: float
    sigma: float
    lam: float
    n_samples: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.sigma > 0 and self.n_samples < 2:
            raise ValueError("a positive sigma needs at least 2 reference passages")

    def threshold(self) -> float:
        return self.mu + self.lam * self.sigma

    def to_json(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "lambda": self.lam,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ReferenceStats":
        return cls(
            mu=float(payload["mu"]),
            sigma=float(payload["sigma"]),
            lam=float(payload["lambda"]),
            n_samples=int(payload["n_samples"]),
        )


def fit_reference(profiles: Iterable[SurprisalProfile], lam: float) -> ReferenceStats:
    """Fit mu and sample (n-1) standard deviation over all reference passages."""
    values = [s for profile in profiles for s in profile.passage_surprisals]
    n = len(values)
    if n < 2:
        raise ValueError("insufficient reference data")
    mu = fmean(values)
    var = sum((s - mu) ** 2 for s in values) / (n - 1)
    return ReferenceStats(mu=mu, sigma=math.sqrt(max(var, 0.0)), lam=lam, n_samples=n)


class PassageFlag(NamedTuple):
    passage_index: int
    surprisal: float
    flagged: bool


def flag_passages(profile: SurprisalProfile, stats: ReferenceStats) -> list[PassageFlag]:
    """Flag passages with surprisal strictly above mu + lambda*sigma. Ties stay unflagged."""
    threshold = stats.threshold()
    return [
        PassageFlag(i, s, s > threshold)
        for i, s in enumerate(profile.passage_surprisals)
    ]


def perplexity(token_surprisals: Sequence[float]) -> float:
    """exp of the mean per-token surprisal (nats)."""
    if len(token_surprisals) == 0:
        raise ValueError("empty sequence")
    return math.exp(fmean(token_surprisals))


def write_profiles_jsonl(path, profiles: Iterable[SurprisalProfile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for profile in profiles:
            fh.write(json.dumps(profile.to_dict(), sort_keys=True) + "\n")


def read_profiles_jsonl(path) -> list[SurprisalProfile]:
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                profiles.append(SurprisalProfile.from_dict(json.loads(line)))
    return profiles
