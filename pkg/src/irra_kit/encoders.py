"""Dual-stream feature extraction encoders.

A patch-based image transformer and a token-based text transformer, each
projecting a designated token's final state (class token / first end-of-
sequence token) into a joint embedding space for cosine retrieval. Image
attention is bidirectional; text attention is causally masked.

Both encoders accept a single example or a leading batch axis; all forward
functions are pure in (input, params).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import layers
from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class ImageEncoderConfig:
    height: int = 32
    width: int = 16
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    joint_dim: int = 64

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ShapeError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclasses.dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = 16
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    joint_dim: int = 64
    sos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.max_len < 3:
            raise ContractError(f"max_len {self.max_len} leaves no room for content tokens")
        if self.embed_dim % self.num_heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")


@dataclasses.dataclass
class EncodedImage:
    global_embed: Tensor  # (joint_dim,)
    token_states: Tensor  # (num_patches, embed_dim), class token excluded


@dataclasses.dataclass
class EncodedText:
    global_embed: Tensor  # (joint_dim,)
    token_states: Tensor  # (max_len, embed_dim)


# -- patch layout ---------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C); row i is the flattened i-th patch in raster order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"patchify wants (H, W, C), got shape {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    grid = image.reshape(h // p, p, w // p, p, c)
    return grid.transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, height: int, width: int, channels: int,
               patch_size: int) -> np.ndarray:
    """Inverse of patchify."""
    p = patch_size
    rows, cols = height // p, width // p
    grid = np.asarray(patches, dtype=np.float64).reshape(rows, cols, p, p, channels)
    return grid.transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


# -- parameters -----------------------------------------------------------------


def init_image_encoder_params(config: ImageEncoderConfig, rng: np.random.Generator,
                              prefix: str = "img") -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    layers.init_linear(p, rng, f"{prefix}.patch", config.patch_dim, config.embed_dim)
    p[f"{prefix}.cls"] = T.parameter(layers.trunc_normal(rng, (1, config.embed_dim)))
    p[f"{prefix}.pos"] = T.parameter(
        layers.trunc_normal(rng, (config.num_patches + 1, config.embed_dim)))
    for i in range(config.num_layers):
        layers.init_block(p, rng, f"{prefix}.block{i}", config.embed_dim)
    layers.init_ln(p, f"{prefix}.ln_f", config.embed_dim)
    p[f"{prefix}.proj"] = T.parameter(
        layers.trunc_normal(rng, (config.embed_dim, config.joint_dim)))
    return p


def init_text_encoder_params(config: TextEncoderConfig, rng: np.random.Generator,
                             prefix: str = "txt") -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p[f"{prefix}.tok"] = T.parameter(
        layers.trunc_normal(rng, (config.vocab_size, config.embed_dim)))
    p[f"{prefix}.pos"] = T.parameter(layers.trunc_normal(rng, (config.max_len, config.embed_dim)))
    for i in range(config.num_layers):
        layers.init_block(p, rng, f"{prefix}.block{i}", config.embed_dim)
    layers.init_ln(p, f"{prefix}.ln_f", config.embed_dim)
    p[f"{prefix}.proj"] = T.parameter(
        layers.trunc_normal(rng, (config.embed_dim, config.joint_dim)))
    return p


# -- forward passes ---------------------------------------------------------------


def encode_images(images: np.ndarray, params: dict[str, Tensor], config: ImageEncoderConfig,
                  prefix: str = "img") -> tuple[Tensor, Tensor]:
    """Encode a (B, H, W, C) batch -> (global (B, joint), patch states (B, N, d))."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (config.height, config.width, config.channels):
        raise ShapeError(
            f"image batch shape {images.shape} does not match config "
            f"(B, {config.height}, {config.width}, {config.channels})"
        )
    b = images.shape[0]
    n, d = config.num_patches, config.embed_dim
    patch_rows = np.stack([patchify(img, config.patch_size) for img in images])  # (B, N, P²C)
    tokens = layers.linear(Tensor(patch_rows), params[f"{prefix}.patch.w"],
                           params[f"{prefix}.patch.b"])
    cls = T.add(Tensor(np.zeros((b, 1, d))), T.reshape(params[f"{prefix}.cls"], (1, 1, d)))
    h = T.concat([cls, tokens], axis=1)
    h = T.add(h, T.reshape(params[f"{prefix}.pos"], (1, n + 1, d)))
    for i in range(config.num_layers):
        h = layers.transformer_block(h, params, f"{prefix}.block{i}", config.num_heads)
    h = layers.ln(h, params, f"{prefix}.ln_f")
    cls_state = T.reshape(T.narrow(h, 1, 0, 1), (b, d))
    global_embed = T.matmul(cls_state, params[f"{prefix}.proj"])
    token_states = T.narrow(h, 1, 1, n)
    return global_embed, token_states


def encode_image(image: np.ndarray, params: dict[str, Tensor], config: ImageEncoderConfig,
                 prefix: str = "img") -> EncodedImage:
    g, tok = encode_images(np.asarray(image)[None], params, config, prefix)
    return EncodedImage(
        global_embed=T.reshape(g, (config.joint_dim,)),
        token_states=T.reshape(tok, (config.num_patches, config.embed_dim)),
    )


def encode_texts(token_ids: np.ndarray, params: dict[str, Tensor], config: TextEncoderConfig,
                 causal_mask: bool = True, prefix: str = "txt") -> tuple[Tensor, Tensor]:
    """Encode a (B, L) id batch -> (global (B, joint), token states (B, L, d)).

    The global embedding is the projected final state at each row's first
    eos token. With the causal mask on, state i never depends on ids j > i.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != config.max_len:
        raise ShapeError(f"token batch shape {ids.shape} does not match (B, {config.max_len})")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range for vocab size {config.vocab_size}")
    if (ids[:, 0] != config.sos_id).any():
        raise ContractError(f"every sequence must start with the [SOS] id {config.sos_id}")
    eos_hits = ids == config.eos_id
    if not eos_hits.any(axis=1).all():
        missing = int(np.flatnonzero(~eos_hits.any(axis=1))[0])
        raise ContractError(f"sequence {missing} has no [EOS] id {config.eos_id}")
    eos_pos = eos_hits.argmax(axis=1)

    b, length, d = ids.shape[0], config.max_len, config.embed_dim
    h = T.embedding(params[f"{prefix}.tok"], ids)
    h = T.add(h, T.reshape(params[f"{prefix}.pos"], (1, length, d)))
    mask = layers.causal_mask_bias(length) if causal_mask else None
    for i in range(config.num_layers):
        h = layers.transformer_block(h, params, f"{prefix}.block{i}", config.num_heads, mask)
    h = layers.ln(h, params, f"{prefix}.ln_f")
    flat = T.reshape(h, (b * length, d))
    eos_states = T.gather_rows(flat, np.arange(b) * length + eos_pos)
    global_embed = T.matmul(eos_states, params[f"{prefix}.proj"])
    return global_embed, h


def encode_text(token_ids: np.ndarray, params: dict[str, Tensor], config: TextEncoderConfig,
                causal_mask: bool = True, prefix: str = "txt") -> EncodedText:
    g, tok = encode_texts(np.asarray(token_ids)[None], params, config, causal_mask, prefix)
    return EncodedText(
        global_embed=T.reshape(g, (config.joint_dim,)),
        token_states=T.reshape(tok, (config.max_len, config.embed_dim)),
    )
