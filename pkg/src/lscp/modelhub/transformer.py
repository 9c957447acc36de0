"""Byte-level decoder-only transformer in numpy with hand-written backprop.

Pre-LN blocks (causal self-attention + GELU MLP), learned positional
embeddings, untied output head. Token id ``vocab_size`` is a start-of-sequence
marker that exists only as an embedding row, so the output distribution is
over real byte values and sums to 1. Everything runs in float64 so analytic
gradients can be checked against central finite differences tightly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 256
    context_length: int = 256
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.context_length, self.embed_dim, self.n_layers, self.n_heads) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ToyModelConfig":
        return cls(**{k: int(v) for k, v in payload.items()})


def init_params(cfg: ToyModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.embed_dim
    std = 0.02
    # Residual output projections get the usual depth-scaled init.
    res_std = std / math.sqrt(2.0 * cfg.n_layers)

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(np.float64)

    params: dict[str, np.ndarray] = {
        "wte": normal((cfg.vocab_size + 1, d), std),
        "wpe": normal((cfg.context_length, d), 0.01),
        "ln_f.g": np.ones(d, dtype=np.float64),
        "ln_f.b": np.zeros(d, dtype=np.float64),
        "head.w": normal((d, cfg.vocab_size), std),
        "head.b": np.zeros(cfg.vocab_size, dtype=np.float64),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}"
        params[f"{p}.ln1.g"] = np.ones(d, dtype=np.float64)
        params[f"{p}.ln1.b"] = np.zeros(d, dtype=np.float64)
        params[f"{p}.attn.w_qkv"] = normal((d, 3 * d), std)
        params[f"{p}.attn.b_qkv"] = np.zeros(3 * d, dtype=np.float64)
        params[f"{p}.attn.w_out"] = normal((d, d), res_std)
        params[f"{p}.attn.b_out"] = np.zeros(d, dtype=np.float64)
        params[f"{p}.ln2.g"] = np.ones(d, dtype=np.float64)
        params[f"{p}.ln2.b"] = np.zeros(d, dtype=np.float64)
        params[f"{p}.mlp.w_in"] = normal((d, 4 * d), std)
        params[f"{p}.mlp.b_in"] = np.zeros(4 * d, dtype=np.float64)
        params[f"{p}.mlp.w_out"] = normal((4 * d, d), res_std)
        params[f"{p}.mlp.b_out"] = np.zeros(d, dtype=np.float64)
    return params


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_forward(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _attn_forward(x, w_qkv, b_qkv, w_out, b_out, n_heads):
    t, d = x.shape
    qkv = x @ w_qkv + b_qkv
    q, k, v = (_split_heads(part, n_heads) for part in np.split(qkv, 3, axis=1))
    scale = 1.0 / math.sqrt(d // n_heads)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, 1)] = -np.inf
    scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(np.matmul(probs, v))
    y = ctx @ w_out + b_out
    return y, (x, q, k, v, probs, ctx, w_qkv, w_out, scale)


def _attn_backward(dy, cache):
    x, q, k, v, probs, ctx, w_qkv, w_out, scale = cache
    t, d = x.shape
    n_heads = q.shape[0]
    g_w_out = ctx.T @ dy
    g_b_out = dy.sum(axis=0)
    dctx = _split_heads(dy @ w_out.T, n_heads)
    dprobs = np.matmul(dctx, v.transpose(0, 2, 1))
    dv = np.matmul(probs.transpose(0, 2, 1), dctx)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(dscores.transpose(0, 2, 1), q)
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1)
    g_w_qkv = x.T @ dqkv
    g_b_qkv = dqkv.sum(axis=0)
    dx = dqkv @ w_qkv.T
    return dx, g_w_qkv, g_b_qkv, g_w_out, g_b_out


def _mlp_forward(x, w_in, b_in, w_out, b_out):
    pre = x @ w_in + b_in
    h, gelu_cache = _gelu_forward(pre)
    y = h @ w_out + b_out
    return y, (x, h, gelu_cache, w_in, w_out)


def _mlp_backward(dy, cache):
    x, h, gelu_cache, w_in, w_out = cache
    g_w_out = h.T @ dy
    g_b_out = dy.sum(axis=0)
    dpre = _gelu_backward(dy @ w_out.T, gelu_cache)
    g_w_in = x.T @ dpre
    g_b_in = dpre.sum(axis=0)
    dx = dpre @ w_in.T
    return dx, g_w_in, g_b_in, g_w_out, g_b_out


def forward(params, cfg: ToyModelConfig, input_ids) -> tuple[np.ndarray, dict]:
    """Logits (T, vocab) over the input embedding-row ids (may include BOS)."""
    t = len(input_ids)
    if t == 0:
        raise ValueError("empty input")
    if t > cfg.context_length:
        raise ValueError("context exceeded")
    idx = np.asarray(input_ids, dtype=np.int64)
    x = params["wte"][idx] + params["wpe"][:t]
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"h{i}"
        a_in, ln1_cache = _ln_forward(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        attn_out, attn_cache = _attn_forward(
            a_in,
            params[f"{p}.attn.w_qkv"],
            params[f"{p}.attn.b_qkv"],
            params[f"{p}.attn.w_out"],
            params[f"{p}.attn.b_out"],
            cfg.n_heads,
        )
        x1 = x + attn_out
        m_in, ln2_cache = _ln_forward(x1, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        mlp_out, mlp_cache = _mlp_forward(
            m_in,
            params[f"{p}.mlp.w_in"],
            params[f"{p}.mlp.b_in"],
            params[f"{p}.mlp.w_out"],
            params[f"{p}.mlp.b_out"],
        )
        x = x1 + mlp_out
        layer_caches.append((ln1_cache, attn_cache, ln2_cache, mlp_cache))
    xf, lnf_cache = _ln_forward(x, params["ln_f.g"], params["ln_f.b"])
    logits = xf @ params["head.w"] + params["head.b"]
    cache = {"idx": idx, "layer_caches": layer_caches, "lnf_cache": lnf_cache, "xf": xf}
    return logits, cache


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _shifted_input(cfg: ToyModelConfig, target_ids) -> np.ndarray:
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty input")
    if targets.min() < 0 or targets.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    return np.concatenate([[cfg.bos_id], targets[:-1]])


def sequence_logprobs(params, cfg: ToyModelConfig, target_ids) -> np.ndarray:
    """logprob of each target token given its prefix (position 0: given BOS)."""
    targets = np.asarray(target_ids, dtype=np.int64)
    logits, _ = forward(params, cfg, _shifted_input(cfg, targets))
    logp = _log_softmax(logits)
    return logp[np.arange(len(targets)), targets]


def next_token_logprobs(params, cfg: ToyModelConfig, prefix_ids) -> np.ndarray:
    """Log-distribution over the next token after the prefix (empty prefix: after BOS)."""
    prefix = np.asarray(prefix_ids, dtype=np.int64)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    input_ids = np.concatenate([[cfg.bos_id], prefix])
    logits, _ = forward(params, cfg, input_ids)
    return _log_softmax(logits[-1])


def final_hidden(params, cfg: ToyModelConfig, target_ids) -> np.ndarray:
    """Final-layernorm hidden states (T, embed_dim) under the scoring convention."""
    _, cache = forward(params, cfg, _shifted_input(cfg, target_ids))
    return cache["xf"]


def loss_and_grads(params, cfg: ToyModelConfig, target_ids) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token surprisal of the targets and gradients for every parameter."""
    targets = np.asarray(target_ids, dtype=np.int64)
    logits, cache = forward(params, cfg, _shifted_input(cfg, targets))
    t = len(targets)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(t), targets].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(t), targets] -= 1.0
    dlogits /= t

    grads: dict[str, np.ndarray] = {}
    xf = cache["xf"]
    grads["head.w"] = xf.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dxf = dlogits @ params["head.w"].T
    dx, grads["ln_f.g"], grads["ln_f.b"] = _ln_backward(dxf, cache["lnf_cache"])

    for i in reversed(range(cfg.n_layers)):
        p = f"h{i}"
        ln1_cache, attn_cache, ln2_cache, mlp_cache = cache["layer_caches"][i]
        dm_in, g_w_in, g_b_in, g_w_out, g_b_out = _mlp_backward(dx, mlp_cache)
        grads[f"{p}.mlp.w_in"] = g_w_in
        grads[f"{p}.mlp.b_in"] = g_b_in
        grads[f"{p}.mlp.w_out"] = g_w_out
        grads[f"{p}.mlp.b_out"] = g_b_out
        dx1, grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = _ln_backward(dm_in, ln2_cache)
        dx1 += dx
        da_in, g_w_qkv, g_b_qkv, g_wo, g_bo = _attn_backward(dx1, attn_cache)
        grads[f"{p}.attn.w_qkv"] = g_w_qkv
        grads[f"{p}.attn.b_qkv"] = g_b_qkv
        grads[f"{p}.attn.w_out"] = g_wo
        grads[f"{p}.attn.b_out"] = g_bo
        dres, grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = _ln_backward(da_in, ln1_cache)
        dx = dx1 + dres

    idx = cache["idx"]
    g_wte = np.zeros_like(params["wte"])
    np.add.at(g_wte, idx, dx)
    grads["wte"] = g_wte
    g_wpe = np.zeros_like(params["wpe"])
    g_wpe[: len(idx)] += dx
    grads["wpe"] = g_wpe
    return loss, grads
