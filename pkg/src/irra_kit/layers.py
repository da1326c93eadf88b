"""Shared transformer building blocks.

Both encoders and the multimodal fusion stack are assembled from the same
pieces: projected multi-head attention, pre-norm residual blocks with a
GELU MLP (expansion 4), and truncated-normal initialization (std 0.02).

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
(e.g. ``img.block0.attn.wq``) so the whole model serializes directly into
the shared checkpoint container.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

LN_EPS = 1e-5
MLP_RATIO = 4

# Large negative attention bias; exp() underflows to exactly 0.0 in float64,
# so masked positions carry no weight and no gradient.
MASK_BIAS = -1.0e30


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until all draws land within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(100):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(..., L, d) -> (..., H, L, d/H)"""
    d = x.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    head = d // num_heads
    lead = x.shape[:-2]
    x = T.reshape(x, lead + (x.shape[-2], num_heads, head))
    axes = tuple(range(len(lead))) + (x.ndim - 3 + 1, x.ndim - 3, x.ndim - 1)
    return T.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, head) -> (..., L, H*head)"""
    lead = x.shape[:-3]
    h, seq, head = x.shape[-3:]
    axes = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    x = T.transpose(x, axes)
    return T.reshape(x, lead + (seq, h * head))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         mask_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    Shapes (..., Lq, d) / (..., Lk, d); the per-head width d/num_heads sets
    the 1/sqrt scale. Returns merged heads, without any output projection.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    head = q.shape[-1] // num_heads
    scores = T.mul(T.matmul(qh, T.transpose(kh, _swap_last2(kh.ndim))), 1.0 / math.sqrt(head))
    if mask_bias is not None:
        scores = T.add(scores, Tensor(mask_bias))
    attn = T.softmax(scores, axis=-1)
    return merge_heads(T.matmul(attn, vh))


def _swap_last2(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def causal_mask_bias(length: int) -> np.ndarray:
    """(L, L) additive bias hiding positions j > i from position i."""
    return np.triu(np.full((length, length), MASK_BIAS), k=1)


def attention_sublayer(x_q: Tensor, x_kv: Tensor, p: dict[str, Tensor], prefix: str,
                       num_heads: int, mask_bias: np.ndarray | None = None) -> Tensor:
    """Projected multi-head attention: wq/wk/wv, attention, then wo mix."""
    q = linear(x_q, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = linear(x_kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = linear(x_kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    out = multi_head_attention(q, k, v, num_heads, mask_bias)
    return linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def mlp_sublayer(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def ln(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps=LN_EPS)


def transformer_block(x: Tensor, p: dict[str, Tensor], prefix: str, num_heads: int,
                      mask_bias: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual block: self-attention then GELU MLP."""
    normed = ln(x, p, f"{prefix}.ln1")
    x = T.add(x, attention_sublayer(normed, normed, p, f"{prefix}.attn", num_heads, mask_bias))
    x = T.add(x, mlp_sublayer(ln(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp"))
    return x


# -- initializers ---------------------------------------------------------------


def init_linear(p: dict[str, Tensor], rng: np.random.Generator, prefix: str,
                d_in: int, d_out: int, std: float = 0.02) -> None:
    p[f"{prefix}.w"] = T.parameter(trunc_normal(rng, (d_in, d_out), std))
    p[f"{prefix}.b"] = T.parameter(np.zeros(d_out))


def init_ln(p: dict[str, Tensor], prefix: str, d: int) -> None:
    p[f"{prefix}.g"] = T.parameter(np.ones(d))
    p[f"{prefix}.b"] = T.parameter(np.zeros(d))


def init_attention(p: dict[str, Tensor], rng: np.random.Generator, prefix: str,
                   d: int, std: float = 0.02) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = T.parameter(trunc_normal(rng, (d, d), std))
    for name in ("bq", "bk", "bv", "bo"):
        p[f"{prefix}.{name}"] = T.parameter(np.zeros(d))


def init_block(p: dict[str, Tensor], rng: np.random.Generator, prefix: str,
               d: int, std: float = 0.02) -> None:
    init_ln(p, f"{prefix}.ln1", d)
    init_attention(p, rng, f"{prefix}.attn", d, std)
    init_ln(p, f"{prefix}.ln2", d)
    p[f"{prefix}.mlp.w1"] = T.parameter(trunc_normal(rng, (d, MLP_RATIO * d), std))
    p[f"{prefix}.mlp.b1"] = T.parameter(np.zeros(MLP_RATIO * d))
    p[f"{prefix}.mlp.w2"] = T.parameter(trunc_normal(rng, (MLP_RATIO * d, d), std))
    p[f"{prefix}.mlp.b2"] = T.parameter(np.zeros(d))
