"""Global-alignment objectives over joint-space embeddings.

Similarity distribution matching (SDM) pushes the softmax-normalized
cosine-similarity distribution of each batch row toward the identity-label
matching distribution, in both retrieval directions. The identity loss
classifies both modalities through one shared linear head, and InfoNCE
provides the plain contrastive baseline. The combined objective is the
unweighted sum of whichever components are enabled.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, ShapeError
from .tensor import Tensor


@dataclasses.dataclass
class PairBatch:
    """Aligned image/text embedding rows with per-pair identity labels."""
    image_embeds: Tensor  # (N, joint_dim)
    text_embeds: Tensor   # (N, joint_dim)
    identity_labels: np.ndarray  # (N,) nonnegative ints

    def __post_init__(self):
        self.identity_labels = np.asarray(self.identity_labels, dtype=np.int64)
        n = self.image_embeds.shape[0]
        if self.text_embeds.shape != self.image_embeds.shape:
            raise ShapeError(
                f"embedding shapes disagree: {self.image_embeds.shape} vs {self.text_embeds.shape}")
        if self.identity_labels.shape != (n,):
            raise ShapeError(f"labels shape {self.identity_labels.shape} does not match N={n}")
        if self.identity_labels.size and self.identity_labels.min() < 0:
            raise ContractError("identity labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.image_embeds.shape[0]


@dataclasses.dataclass(frozen=True)
class SdmConfig:
    temperature: float = 0.02
    epsilon: float = 1e-8
    # Swap the divergence direction (target-first instead of predicted-first);
    # off by default, kept for study.
    reverse_kl: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")


@dataclasses.dataclass(frozen=True)
class LossToggles:
    sdm: bool = True
    id: bool = True
    irr: bool = True


@dataclasses.dataclass
class MatchMatrix:
    """Binary label-match matrix y and its row-normalized form q."""
    y: np.ndarray  # (N, N) in {0, 1}; y[i, j] = 1 iff labels i and j agree
    q: np.ndarray  # (N, N); each row of y divided by its row sum

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "MatchMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        y = (labels[:, None] == labels[None, :]).astype(np.float64)
        q = y / y.sum(axis=1, keepdims=True)
        return cls(y=y, q=q)


def cosine_similarity_matrix(batch: PairBatch) -> Tensor:
    """(N, N) cosine similarities, entry (i, j) = image i vs text j."""
    for name, emb in (("image", batch.image_embeds), ("text", batch.text_embeds)):
        norms = np.linalg.norm(emb.data, axis=1)
        if (norms == 0.0).any():
            row = int(np.flatnonzero(norms == 0.0)[0])
            raise DegenerateInputError(f"{name} embedding row {row} has zero norm")
    img_n = _l2_normalize_rows(batch.image_embeds)
    txt_n = _l2_normalize_rows(batch.text_embeds)
    return T.matmul(img_n, txt_n.T)


def _l2_normalize_rows(x: Tensor) -> Tensor:
    norms = T.sqrt(T.tensor_sum(T.mul(x, x), axis=1, keepdims=True))
    return T.div(x, norms)


def sdm_loss(batch: PairBatch, config: SdmConfig) -> Tensor:
    """Bidirectional similarity distribution matching loss.

    Per direction: p = softmax(sim / temperature) row-wise, and the loss is
    the mean over rows of sum_j p log(p / (q + epsilon)) against the
    label-derived matching distribution q. The text-to-image direction
    exchanges the roles of the two modalities (transposed similarities).
    """
    if batch.n < 1:
        raise ContractError("sdm_loss needs at least one pair")
    sim = cosine_similarity_matrix(batch)
    q = MatchMatrix.from_labels(batch.identity_labels).q
    i2t = _sdm_direction(sim, q, config)
    t2i = _sdm_direction(T.transpose(sim, (1, 0)), q, config)
    return T.add(i2t, t2i)


def _sdm_direction(sim: Tensor, q: np.ndarray, config: SdmConfig) -> Tensor:
    n = sim.shape[0]
    logits = T.mul(sim, 1.0 / config.temperature)
    log_p = T.log_softmax(logits, axis=1)
    p = T.exp(log_p)
    log_q = np.log(q + config.epsilon)
    if not config.reverse_kl:
        # predicted-first: sum p * (log p - log(q + eps))
        per_pair = T.mul(p, T.add(log_p, Tensor(-log_q)))
    else:
        # target-first: sum q * (log q - log(p + eps))
        q_t = Tensor(q)
        log_qq = np.where(q > 0, np.log(np.maximum(q, 1e-300)), 0.0)
        per_pair = T.mul(q_t, T.add(Tensor(log_qq), T.neg(T.log(T.add(p, config.epsilon)))))
    return T.mul(T.tensor_sum(per_pair), 1.0 / n)


def id_loss(image_embeds: Tensor, text_embeds: Tensor, identity_labels: np.ndarray,
            classifier_w: Tensor) -> Tensor:
    """Identity classification averaged over the two modality branches.

    Both branches share one linear classifier so same-identity image and
    text embeddings are pulled toward the same class direction.
    """
    labels = np.asarray(identity_labels, dtype=np.int64)
    img_ce = T.cross_entropy(T.matmul(image_embeds, classifier_w), labels)
    txt_ce = T.cross_entropy(T.matmul(text_embeds, classifier_w), labels)
    return T.mul(T.add(img_ce, txt_ce), 0.5)


def infonce_loss(batch: PairBatch, temperature: float = 0.02) -> Tensor:
    """Symmetric cross-entropy over similarity logits with diagonal targets."""
    sim = cosine_similarity_matrix(batch)
    logits = T.mul(sim, 1.0 / temperature)
    diag = np.arange(batch.n)
    i2t = T.cross_entropy(logits, diag)
    t2i = T.cross_entropy(T.transpose(logits, (1, 0)), diag)
    return T.mul(T.add(i2t, t2i), 0.5)


def total_loss(l_irr: Tensor | None, l_sdm: Tensor | None, l_id: Tensor | None,
               toggles: LossToggles) -> Tensor:
    """Unweighted sum of the enabled components."""
    parts = []
    if toggles.irr:
        parts.append(_require(l_irr, "irr"))
    if toggles.sdm:
        parts.append(_require(l_sdm, "sdm"))
    if toggles.id:
        parts.append(_require(l_id, "id"))
    if not parts:
        raise ContractError("all loss components toggled off")
    out = parts[0]
    for part in parts[1:]:
        out = T.add(out, part)
    return out


def _require(value: Tensor | None, name: str) -> Tensor:
    if value is None:
        raise ContractError(f"loss component {name!r} is enabled but missing")
    return value
