"""AdamW with per-item second-moment gating.

A from-scratch AdamW (bias-corrected moments, decoupled weight decay) whose
beta2 can be lowered per training item according to the item's conviction
depth k: beta2(k) = 0.999 * r**k, floored for safety. k = 0 leaves the
optimizer exactly at standard AdamW; larger k lets the second moment forget
its history faster, so verified novel content produces larger updates.

Training is strictly single-threaded: per-item beta2 switching on shared
optimizer state has no defined meaning under concurrent steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TYPE_CHECKING

import numpy as np

from .errors import BackendError

if TYPE_CHECKING:
    from .verifier import TrainItem

BETA2_DEFAULT = 0.999


@dataclass(frozen=True)
class GateSchedule:
    """Maps conviction depth k to the effective beta2 = 0.999 * r**k."""

    r: float
    beta2_floor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"r must be in (0, 1], got {self.r}")
        if not 0.0 < self.beta2_floor < 1.0:
            raise ValueError(f"beta2_floor must be in (0, 1), got {self.beta2_floor}")

    def beta2_for(self, k: int) -> float:
        if k < 0:
            raise ValueError(f"conviction depth must be >= 0, got {k}")
        return max(BETA2_DEFAULT * self.r**k, self.beta2_floor)


@dataclass
class OptimizerState:
    """First/second moment estimates, step counter, and hyperparameters."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2_default: float = BETA2_DEFAULT
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 < self.beta1 < 1.0:
            raise ValueError("beta1 must be in (0, 1)")


def apply_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    beta2_effective: float | None = None,
) -> Mapping[str, np.ndarray]:
    """One AdamW step over named parameter arrays, updated in place.

    All gradients are validated before any state is touched, so a shape
    mismatch or non-finite gradient leaves parameters and moments unchanged.
    """
    beta2 = state.beta2_default if beta2_effective is None else beta2_effective
    if not 0.0 < beta2 < 1.0:
        raise ValueError(f"beta2 must be in (0, 1), got {beta2}")
    if set(params.keys()) != set(grads.keys()):
        raise ValueError("parameter/gradient name mismatch")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")

    t = state.step + 1
    b1 = state.beta1
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
    state.step = t
    return params


def train_corpus(
    backend,
    items: Sequence["TrainItem"],
    schedule: GateSchedule,
    epochs: int,
    lr: float,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> dict:
    """Train the toy backend on a corpus with per-item beta2 gating.

    One optimizer is shared across all items and never reset; each item's
    step uses beta2_for(item.conviction_k), and beta2 reverts to the default
    simply because the next item sets its own. Items are shuffled once per
    epoch with a seeded RNG. Returns a JSON-serializable training report.
    """
    if not items:
        raise ValueError("empty training corpus")
    if epochs <= 0:
        raise ValueError("epochs must be positive")

    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    context = backend.context_length
    per_item = [
        {
            "item_id": idx,
            "kind": item.kind,
            "k": item.conviction_k,
            "beta2": schedule.beta2_for(item.conviction_k),
            "losses": [],
        }
        for idx, item in enumerate(items)
    ]
    diverged = False
    last_good = None
    for _epoch in range(epochs):
        order = rng.permutation(len(items))
        for idx in order:
            idx = int(idx)
            item = items[idx]
            token_ids = backend.tokenize(item.text)
            if context is not None:
                token_ids = token_ids[:context]
            beta2 = per_item[idx]["beta2"]
            try:
                loss = backend.train_step(
                    token_ids,
                    lambda params, grads: apply_step(state, params, grads, beta2),
                )
            except (ValueError, BackendError) as exc:
                # non-finite loss or gradient: divergence, not a crash
                if "non-finite" in str(exc):
                    diverged = True
                    break
                raise
            if not math.isfinite(loss):
                diverged = True
                break
            per_item[idx]["losses"].append(float(loss))
            last_good = {"item_id": idx, "step": state.step, "loss": float(loss)}
        if diverged:
            break

    return {
        "epochs": epochs,
        "steps": state.step,
        "per_item": per_item,
        "final_losses": [
            entry["losses"][-1] if entry["losses"] else None for entry in per_item
        ],
        "diverged": diverged,
        "last_good_step": last_good,
        "lr": lr,
        "weight_decay": weight_decay,
        "r": schedule.r,
    }
