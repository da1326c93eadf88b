"""Multimodal interaction encoder and the masked-token relation loss.

Three interchangeable fusion designs, all mapping (masked-text states,
image patch states) to one fused state per text position:

  * ``ours``: masked text queries cross-attend once into image keys/values
    (MCA layer), then shared transformer blocks refine the fused sequence.
  * ``co_attention``: two parallel streams; per block each stream runs
    self-attention, cross-attention into the other stream, and an MLP.
    The text stream is returned.
  * ``merged_attention``: both sequences are concatenated and run through
    shared blocks; the text positions are returned.

At any fixed (hidden_dim, heads, num_blocks) the parameter counts order
co_attention > ours > merged_attention: the co-attention design duplicates
every block per stream, while ours only adds one MCA layer over merged
attention.

A module-level counter tracks fusion forward passes so the evaluation path
can prove it never runs this branch.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import layers
from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

VARIANTS = ("ours", "co_attention", "merged_attention")

_FORWARD_CALLS = 0


def fusion_forward_calls() -> int:
    return _FORWARD_CALLS


def reset_fusion_forward_calls() -> None:
    global _FORWARD_CALLS
    _FORWARD_CALLS = 0


def _count_forward() -> None:
    global _FORWARD_CALLS
    _FORWARD_CALLS += 1


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    variant: str = "ours"
    hidden_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown fusion variant {self.variant!r}, want one of {VARIANTS}")
        if self.hidden_dim % self.num_heads:
            raise ShapeError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")


@dataclasses.dataclass(frozen=True)
class MaskedPositions:
    """Indices that were selected for masking, with their original token ids."""
    positions: tuple[int, ...]
    original_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(i) for i in self.positions))
        object.__setattr__(self, "original_ids", tuple(int(i) for i in self.original_ids))
        if len(self.positions) != len(self.original_ids):
            raise ContractError("positions and original_ids must pair up")
        if len(set(self.positions)) != len(self.positions):
            raise ContractError("masked positions must be unique")
        if any(i < 0 for i in self.positions):
            raise ContractError("masked positions must be nonnegative")

    def __len__(self) -> int:
        return len(self.positions)


# Fused states are plain (..., L, hidden_dim) tensors; row count always equals
# the text length regardless of the image patch count.
FusedStates = Tensor


# -- parameters -----------------------------------------------------------------


def init_fusion_params(config: FusionConfig, rng: np.random.Generator,
                       d_text: int, d_img: int, prefix: str = "fusion") -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    d = config.hidden_dim
    layers.init_linear(p, rng, f"{prefix}.in_txt", d_text, d)
    layers.init_linear(p, rng, f"{prefix}.in_img", d_img, d)
    if config.variant == "ours":
        layers.init_ln(p, f"{prefix}.ln_q", d)
        layers.init_ln(p, f"{prefix}.ln_kv", d)
        layers.init_attention(p, rng, f"{prefix}.mca", d)
        for i in range(config.num_blocks):
            layers.init_block(p, rng, f"{prefix}.block{i}", d)
    elif config.variant == "merged_attention":
        for i in range(config.num_blocks):
            layers.init_block(p, rng, f"{prefix}.block{i}", d)
    else:  # co_attention
        for i in range(config.num_blocks):
            for stream in ("txt", "img"):
                base = f"{prefix}.block{i}.{stream}"
                layers.init_ln(p, f"{base}.ln_s", d)
                layers.init_attention(p, rng, f"{base}.self", d)
                layers.init_ln(p, f"{base}.ln_c", d)
                layers.init_ln(p, f"{base}.ln_ckv", d)
                layers.init_attention(p, rng, f"{base}.cross", d)
                layers.init_ln(p, f"{base}.ln_m", d)
                p[f"{base}.mlp.w1"] = T.parameter(layers.trunc_normal(rng, (d, layers.MLP_RATIO * d)))
                p[f"{base}.mlp.b1"] = T.parameter(np.zeros(layers.MLP_RATIO * d))
                p[f"{base}.mlp.w2"] = T.parameter(layers.trunc_normal(rng, (layers.MLP_RATIO * d, d)))
                p[f"{base}.mlp.b2"] = T.parameter(np.zeros(d))
    return p


def init_mlm_head_params(rng: np.random.Generator, hidden_dim: int, vocab_size: int,
                         prefix: str = "mlm") -> dict[str, Tensor]:
    """One hidden layer (dense, GELU, layer norm) then a vocabulary decoder."""
    p: dict[str, Tensor] = {}
    layers.init_linear(p, rng, f"{prefix}.hidden", hidden_dim, hidden_dim)
    layers.init_ln(p, f"{prefix}.ln", hidden_dim)
    layers.init_linear(p, rng, f"{prefix}.out", hidden_dim, vocab_size)
    return p


# -- operations -------------------------------------------------------------------


def mca(q: Tensor, k: Tensor, v: Tensor, w_out: Tensor, b_out: Tensor | None,
        num_heads: int) -> Tensor:
    """Multi-head cross attention over already-projected streams.

    Per head: softmax(q kᵀ / sqrt(d_head)) v; head outputs are concatenated
    and linearly mixed by ``w_out``. Every attention row sums to 1.
    """
    out = layers.multi_head_attention(q, k, v, num_heads)
    return layers.linear(out, w_out, b_out)


def _project_inputs(text_states: Tensor, image_states: Tensor, p: dict[str, Tensor],
                    prefix: str) -> tuple[Tensor, Tensor]:
    t = layers.linear(text_states, p[f"{prefix}.in_txt.w"], p[f"{prefix}.in_txt.b"])
    v = layers.linear(image_states, p[f"{prefix}.in_img.w"], p[f"{prefix}.in_img.b"])
    return t, v


def fuse_ours(text_states: Tensor, image_states: Tensor, p: dict[str, Tensor],
              config: FusionConfig, prefix: str = "fusion") -> FusedStates:
    """Cross-attention fusion: text queries image, then shared blocks."""
    _count_forward()
    t, v = _project_inputs(text_states, image_states, p, prefix)
    attended = layers.attention_sublayer(
        layers.ln(t, p, f"{prefix}.ln_q"), layers.ln(v, p, f"{prefix}.ln_kv"),
        p, f"{prefix}.mca", config.num_heads)
    h = T.add(t, attended)
    for i in range(config.num_blocks):
        h = layers.transformer_block(h, p, f"{prefix}.block{i}", config.num_heads)
    return h


def fuse_co_attention(text_states: Tensor, image_states: Tensor, p: dict[str, Tensor],
                      config: FusionConfig, prefix: str = "fusion") -> FusedStates:
    """Two parallel streams exchanging information through cross-attention."""
    _count_forward()
    t, v = _project_inputs(text_states, image_states, p, prefix)
    for i in range(config.num_blocks):
        t_base, v_base = t, v
        streams = {}
        for name, x, other in (("txt", t_base, v_base), ("img", v_base, t_base)):
            base = f"{prefix}.block{i}.{name}"
            normed = layers.ln(x, p, f"{base}.ln_s")
            x = T.add(x, layers.attention_sublayer(normed, normed, p, f"{base}.self",
                                                   config.num_heads))
            x = T.add(x, layers.attention_sublayer(
                layers.ln(x, p, f"{base}.ln_c"), layers.ln(other, p, f"{base}.ln_ckv"),
                p, f"{base}.cross", config.num_heads))
            x = T.add(x, layers.mlp_sublayer(layers.ln(x, p, f"{base}.ln_m"), p, f"{base}.mlp"))
            streams[name] = x
        t, v = streams["txt"], streams["img"]
    return t


def fuse_merged_attention(text_states: Tensor, image_states: Tensor, p: dict[str, Tensor],
                          config: FusionConfig, prefix: str = "fusion") -> FusedStates:
    """Concatenate both sequences and run shared blocks; return text rows."""
    _count_forward()
    t, v = _project_inputs(text_states, image_states, p, prefix)
    length = t.shape[-2]
    h = T.concat([t, v], axis=t.ndim - 2)
    for i in range(config.num_blocks):
        h = layers.transformer_block(h, p, f"{prefix}.block{i}", config.num_heads)
    return T.narrow(h, h.ndim - 2, 0, length)


_FUSE_FNS = {
    "ours": fuse_ours,
    "co_attention": fuse_co_attention,
    "merged_attention": fuse_merged_attention,
}


def fuse(text_states: Tensor, image_states: Tensor, p: dict[str, Tensor],
         config: FusionConfig, prefix: str = "fusion") -> FusedStates:
    return _FUSE_FNS[config.variant](text_states, image_states, p, config, prefix)


def mlm_logits(states: Tensor, p: dict[str, Tensor], prefix: str = "mlm") -> Tensor:
    h = T.gelu(layers.linear(states, p[f"{prefix}.hidden.w"], p[f"{prefix}.hidden.b"]))
    h = layers.ln(h, p, f"{prefix}.ln")
    return layers.linear(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def irr_loss(fused: FusedStates, masked: MaskedPositions | Sequence[MaskedPositions],
             p: dict[str, Tensor], vocab_scale: bool = False,
             prefix: str = "mlm") -> Tensor:
    """Mean cross-entropy of the MLM head at masked positions.

    A batched call passes (B, L, d) states with one MaskedPositions per
    example; positions then index within each example's rows. An empty mask
    set yields a constant zero loss so training never crashes on batches
    where random masking selected nothing.

    ``vocab_scale`` additionally divides by the vocabulary size, recovering
    the literal normalization of the relation-loss definition; the default
    keeps loss magnitude comparable across vocabulary sizes.
    """
    if fused.ndim == 2:
        batches = [masked] if isinstance(masked, MaskedPositions) else list(masked)
        if len(batches) != 1:
            raise ShapeError("2-d fused states take exactly one MaskedPositions")
        states = fused
        length = fused.shape[0]
        flat_positions = list(batches[0].positions)
        targets = list(batches[0].original_ids)
        if flat_positions and max(flat_positions) >= length:
            raise ContractError(f"masked position out of range for {length} rows")
    else:
        if isinstance(masked, MaskedPositions):
            raise ShapeError("3-d fused states take one MaskedPositions per example")
        b, length, d = fused.shape
        if len(masked) != b:
            raise ShapeError(f"{len(masked)} mask sets for batch of {b}")
        states = T.reshape(fused, (b * length, d))
        flat_positions, targets = [], []
        for row, m in enumerate(masked):
            if m.positions and max(m.positions) >= length:
                raise ContractError(f"masked position out of range for {length} rows")
            flat_positions.extend(row * length + i for i in m.positions)
            targets.extend(m.original_ids)

    if not flat_positions:
        return Tensor(0.0)
    picked = T.gather_rows(states, flat_positions)
    logits = mlm_logits(picked, p, prefix)
    loss = T.cross_entropy(logits, np.asarray(targets))
    if vocab_scale:
        loss = T.mul(loss, 1.0 / p[f"{prefix}.out.w"].shape[1])
    return loss
