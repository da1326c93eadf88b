"""End-to-end training loop, optimizer, schedules, and study harnesses.

The objective is the unweighted sum of the enabled loss components
(masked-token relation loss through the fusion branch, similarity
distribution matching, identity classification), with a plain InfoNCE
baseline available when all three are off. The fusion branch only runs
while training; retrieval evaluation encodes each modality once and
compares global embeddings, nothing else.

Two optimizer groups exist: encoder parameters (img./txt.) and the
randomly-initialized task modules (fusion./mlm./idcls.), each with its own
base learning rate under a shared linear-warmup + half-cosine-decay shape.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import encoders as E
from . import fusion as F
from . import losses as L
from . import metrics as M
from . import tensor as T
from .errors import ContractError, TrainingDivergedError
from .tensor import Tensor

ENCODER_PREFIXES = ("img.", "txt.")


# -- learning-rate schedule -----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    start_factor: float = 0.1  # warmup starts at base_lr * start_factor

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError(
                f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear ramp to base_lr over the warmup, then half-cosine decay to 0."""
    if step < 0:
        raise ContractError(f"step must be nonnegative, got {step}")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        frac = step / sched.warmup_steps
        return sched.base_lr * (sched.start_factor + (1.0 - sched.start_factor) * frac)
    if sched.total_steps == sched.warmup_steps:
        return sched.base_lr
    progress = min(1.0, (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps))
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- Adam -------------------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place. Missing grads count as zero."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# -- configuration ------------------------------------------------------------------


@dataclasses.dataclass
class LossConfig:
    sdm: bool = True
    id: bool = True
    irr: bool = True
    infonce: bool = False
    sdm_reverse_kl: bool = False
    irr_vocab_scale: bool = False

    def toggles(self) -> L.LossToggles:
        return L.LossToggles(sdm=self.sdm, id=self.id, irr=self.irr)

    def any_enabled(self) -> bool:
        return self.sdm or self.id or self.irr or self.infonce


@dataclasses.dataclass
class MaskConfig:
    p_mask: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 2e-3
    new_module_lr: float = 2e-3
    warmup_epochs: int = 2
    lr_start_factor: float = 0.1
    temperature: float = 0.02
    epsilon: float = 1e-8
    seed: int = 0
    val_every: int = 1
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    mask: MaskConfig = dataclasses.field(default_factory=MaskConfig)
    image_encoder: E.ImageEncoderConfig = dataclasses.field(default_factory=E.ImageEncoderConfig)
    text_encoder: E.TextEncoderConfig = dataclasses.field(default_factory=E.TextEncoderConfig)
    fusion: F.FusionConfig = dataclasses.field(default_factory=F.FusionConfig)
    augment: D.AugmentConfig = dataclasses.field(default_factory=D.AugmentConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0 or self.new_module_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ContractError(
                f"warmup_epochs {self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if not self.loss.any_enabled():
            raise ContractError("no loss component enabled (and no infonce baseline)")

    def sdm_config(self) -> L.SdmConfig:
        return L.SdmConfig(temperature=self.temperature, epsilon=self.epsilon,
                           reverse_kl=self.loss.sdm_reverse_kl)


# -- run log -------------------------------------------------------------------------


@dataclasses.dataclass
class StepRecord:
    step: int
    epoch: int
    components: dict[str, float]
    total: float
    wall_ms: float


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    report: M.RetrievalReport


@dataclasses.dataclass
class RunLog:
    steps: list[StepRecord] = dataclasses.field(default_factory=list)
    epochs: list[EpochRecord] = dataclasses.field(default_factory=list)

    def final_report(self) -> M.RetrievalReport | None:
        return self.epochs[-1].report if self.epochs else None

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for s in self.steps:
                f.write(json.dumps({
                    "type": "step", "step": s.step, "epoch": s.epoch,
                    "components": s.components, "total": s.total, "wall_ms": s.wall_ms,
                }) + "\n")
            for e in self.epochs:
                f.write(json.dumps({
                    "type": "epoch", "epoch": e.epoch,
                    "report": e.report.to_dict(include_per_query=False),
                }) + "\n")

    def loss_curve(self) -> list[float]:
        return [s.total for s in self.steps]


# -- model assembly -------------------------------------------------------------------


def init_model_params(config: TrainConfig, vocab_size: int, num_identities: int,
                      rng: np.random.Generator) -> dict[str, Tensor]:
    tcfg = dataclasses.replace(config.text_encoder, vocab_size=vocab_size)
    params: dict[str, Tensor] = {}
    params.update(E.init_image_encoder_params(config.image_encoder, rng))
    params.update(E.init_text_encoder_params(tcfg, rng))
    if config.loss.irr:
        params.update(F.init_fusion_params(
            config.fusion, rng,
            d_text=config.text_encoder.embed_dim, d_img=config.image_encoder.embed_dim))
        params.update(F.init_mlm_head_params(rng, config.fusion.hidden_dim, vocab_size))
    if config.loss.id:
        joint = config.image_encoder.joint_dim
        params["idcls.w"] = T.parameter(
            np.asarray(rng.normal(0.0, 0.02, size=(joint, num_identities))))
    return params


def split_param_groups(params: dict[str, Tensor]) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """(encoder params, randomly-initialized task-module params)."""
    enc = {k: v for k, v in params.items() if k.startswith(ENCODER_PREFIXES)}
    new = {k: v for k, v in params.items() if not k.startswith(ENCODER_PREFIXES)}
    return enc, new


# -- evaluation path -------------------------------------------------------------------


def encode_gallery_and_queries(params: dict[str, Tensor], records: list[D.AnnotationRecord],
                               vocab: D.Vocab, config: TrainConfig):
    """Embed every record image and caption; no fusion, no gradients.

    Returns (sim, query_ids, gallery_ids): texts are queries, images form
    the gallery, one similarity score per pair.
    """
    tcfg = dataclasses.replace(config.text_encoder, vocab_size=vocab.size)
    gallery_ids = np.asarray([r.identity_id for r in records], dtype=np.int64)
    images = np.stack([D.load_image(r) for r in records])
    query_ids = []
    token_rows = []
    for r in records:
        for cap in r.captions:
            token_rows.append(D.tokenize(cap, vocab, tcfg.max_len))
            query_ids.append(r.identity_id)
    with T.no_grad():
        img_embeds = E.encode_images(images, params, config.image_encoder)[0].data
        txt_embeds = E.encode_texts(np.stack(token_rows), params, tcfg)[0].data
    qn = txt_embeds / np.linalg.norm(txt_embeds, axis=1, keepdims=True)
    gn = img_embeds / np.linalg.norm(img_embeds, axis=1, keepdims=True)
    return qn @ gn.T, np.asarray(query_ids, dtype=np.int64), gallery_ids


def evaluate_model(params: dict[str, Tensor], records: list[D.AnnotationRecord],
                   vocab: D.Vocab, config: TrainConfig,
                   ks=M.DEFAULT_KS) -> M.RetrievalReport:
    sim, query_ids, gallery_ids = encode_gallery_and_queries(params, records, vocab, config)
    return M.evaluate(sim, query_ids, gallery_ids, ks=ks)


# -- training loop ---------------------------------------------------------------------


def build_vocab(records: list[D.AnnotationRecord]) -> D.Vocab:
    return D.Vocab.build([cap for r in records for cap in r.captions])


def train_run(records: list[D.AnnotationRecord], config: TrainConfig,
              ) -> tuple[dict[str, Tensor], RunLog, D.Vocab]:
    """Run the full optimization loop; deterministic for a fixed seed.

    Returns (params, log, vocab). With epochs=0 the initialized parameters
    come back with an empty log. A non-finite loss component aborts with a
    diagnostic naming the component and step.
    """
    by_split = D.split_records(records)
    train_recs = by_split.get("train", [])
    if not train_recs:
        raise ContractError("dataset has no 'train' records")
    val_recs = by_split.get("val", [])

    vocab = build_vocab(train_recs)
    tcfg = dataclasses.replace(config.text_encoder, vocab_size=vocab.size)
    num_identities = max(r.identity_id for r in records) + 1

    seq = np.random.SeedSequence(config.seed)
    init_ss, data_ss = seq.spawn(2)
    rng_init = np.random.default_rng(init_ss)
    rng_data = np.random.default_rng(data_ss)

    params = init_model_params(config, vocab.size, num_identities, rng_init)
    enc_params, new_params = split_param_groups(params)

    samples = [(ri, ci) for ri, rec in enumerate(train_recs) for ci in range(len(rec.captions))]
    base_images = [D.load_image(rec) for rec in train_recs]
    token_cache = {
        (ri, ci): D.tokenize(train_recs[ri].captions[ci], vocab, tcfg.max_len)
        for ri, ci in samples
    }

    steps_per_epoch = max(1, math.ceil(len(samples) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    enc_sched = LrSchedule(config.base_lr, config.warmup_epochs * steps_per_epoch,
                           max(total_steps, 1), config.lr_start_factor)
    new_sched = LrSchedule(config.new_module_lr, config.warmup_epochs * steps_per_epoch,
                           max(total_steps, 1), config.lr_start_factor)
    enc_state, new_state = AdamState(), AdamState()

    log = RunLog()
    sdm_cfg = config.sdm_config()
    step = 0
    for epoch in range(config.epochs):
        order = rng_data.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            t0 = time.perf_counter()
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            images = np.stack([
                D.augment_image(base_images[ri], rng_data, config.augment) for ri, _ in chunk])
            ids = np.stack([token_cache[key] for key in chunk])
            labels = np.asarray([train_recs[ri].identity_id for ri, _ in chunk])

            components: dict[str, Tensor] = {}
            img_global, img_tokens = E.encode_images(images, params, config.image_encoder)
            txt_global, _ = E.encode_texts(ids, params, tcfg)
            pair = L.PairBatch(img_global, txt_global, labels)
            if config.loss.sdm:
                components["sdm"] = L.sdm_loss(pair, sdm_cfg)
            if config.loss.id:
                components["id"] = L.id_loss(img_global, txt_global, labels, params["idcls.w"])
            if config.loss.irr:
                masked = [
                    D.mask_tokens(token_cache[key], vocab, rng_data,
                                  config.mask.p_mask, config.mask.mask_prob,
                                  config.mask.random_prob)
                    for key in chunk
                ]
                _, masked_states = E.encode_texts(
                    np.stack([mc.input_ids for mc in masked]), params, tcfg)
                fused = F.fuse(masked_states, img_tokens, params, config.fusion)
                components["irr"] = F.irr_loss(fused, [mc.masked for mc in masked], params,
                                               vocab_scale=config.loss.irr_vocab_scale)
            if config.loss.infonce:
                components["infonce"] = L.infonce_loss(pair, config.temperature)

            for name, value in components.items():
                if not np.isfinite(value.data):
                    raise TrainingDivergedError(
                        f"{name} loss is not finite at step {step} (epoch {epoch})")

            if config.loss.sdm or config.loss.id or config.loss.irr:
                total = L.total_loss(components.get("irr"), components.get("sdm"),
                                     components.get("id"), config.loss.toggles())
                if config.loss.infonce:
                    total = T.add(total, components["infonce"])
            else:
                total = components["infonce"]

            T.zero_grads(params)
            T.backward(total)
            grads = {name: p.grad for name, p in params.items()}
            adam_step(enc_params, grads, enc_state, lr_at(step, enc_sched))
            adam_step(new_params, grads, new_state, lr_at(step, new_sched))

            log.steps.append(StepRecord(
                step=step, epoch=epoch,
                components={k: v.item() for k, v in components.items()},
                total=total.item(),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            ))
            step += 1
        if val_recs and ((epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs):
            log.epochs.append(EpochRecord(epoch, evaluate_model(params, val_recs, vocab, config)))
    return params, log, vocab


# -- study harnesses --------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class FusionCompareConfig:
    """Latency/size comparison runs at full-scale fusion dimensions by default."""
    hidden_dim: int = 512
    num_heads: int = 8
    num_blocks: int = 4
    text_len: int = 77
    num_patches: int = 192
    d_text: int = 512
    d_img: int = 512
    repeats: int = 5
    seed: int = 0


def compare_fusion_variants(cfg: FusionCompareConfig = FusionCompareConfig()) -> list[dict]:
    """Parameter counts and forward latency for the three fusion designs.

    Raises if the parameter-count ordering co_attention > ours >
    merged_attention ever fails; the caller gets one row per variant.
    """
    rows = []
    for variant in F.VARIANTS:
        fcfg = F.FusionConfig(variant=variant, hidden_dim=cfg.hidden_dim,
                              num_heads=cfg.num_heads, num_blocks=cfg.num_blocks)
        rng = np.random.default_rng(cfg.seed)
        p = F.init_fusion_params(fcfg, rng, d_text=cfg.d_text, d_img=cfg.d_img)
        txt = Tensor(rng.normal(size=(cfg.text_len, cfg.d_text)))
        img = Tensor(rng.normal(size=(cfg.num_patches, cfg.d_img)))
        with T.no_grad():
            F.fuse(txt, img, p, fcfg)  # warmup
            times = []
            for _ in range(cfg.repeats):
                t0 = time.perf_counter()
                F.fuse(txt, img, p, fcfg)
                times.append((time.perf_counter() - t0) * 1e3)
        rows.append({
            "variant": variant,
            "param_count": T.parameter_count(p),
            "latency_ms": float(np.median(times)),
        })
    counts = {r["variant"]: r["param_count"] for r in rows}
    if not counts["co_attention"] > counts["ours"] > counts["merged_attention"]:
        raise ContractError(f"unexpected parameter-count ordering: {counts}")
    return rows


ABLATION_GRID = (
    (),                      # row 0: InfoNCE baseline
    ("sdm",),
    ("id",),
    ("irr",),
    ("sdm", "id"),
    ("sdm", "irr"),
    ("id", "irr"),
    ("sdm", "id", "irr"),    # row 7: full objective
)


def ablation_config(base: TrainConfig, enabled: tuple[str, ...], seed: int) -> TrainConfig:
    loss = LossConfig(
        sdm="sdm" in enabled, id="id" in enabled, irr="irr" in enabled,
        infonce=not enabled,
        sdm_reverse_kl=base.loss.sdm_reverse_kl,
        irr_vocab_scale=base.loss.irr_vocab_scale,
    )
    return dataclasses.replace(base, loss=loss, seed=seed)


def run_ablation(records: list[D.AnnotationRecord], base: TrainConfig,
                 seeds: tuple[int, ...] = (0,)) -> list[dict]:
    """Train every row of the loss-toggle grid; means over seeds."""
    rows = []
    for row_idx, enabled in enumerate(ABLATION_GRID):
        reports = []
        for seed in seeds:
            cfg = ablation_config(base, enabled, seed)
            _, log, _ = train_run(records, cfg)
            report = log.final_report()
            if report is None:
                raise ContractError("ablation needs a 'val' split to report retrieval metrics")
            reports.append(report)
        rows.append({
            "row": row_idx,
            "label": "baseline (infonce)" if not enabled else "+".join(enabled),
            "loss": {"sdm": "sdm" in enabled, "id": "id" in enabled, "irr": "irr" in enabled},
            "seeds": list(seeds),
            "rank1": float(np.mean([r.rank1 for r in reports])),
            "rank5": float(np.mean([r.rank5 for r in reports])),
            "rank10": float(np.mean([r.rank10 for r in reports])),
            "mAP": float(np.mean([r.mAP for r in reports])),
            "mINP": float(np.mean([r.mINP for r in reports])),
        })
    return rows
