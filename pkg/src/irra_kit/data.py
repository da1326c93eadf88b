"""Dataset plumbing: annotations, toy tokenizer, masking, augmentation,
and a synthetic identity/caption generator.

The synthetic generator gives every identity a latent attribute tuple
(shirt color, pants color, accessory). Images are procedural block
renderings of those attributes plus per-image noise, and captions are
template sentences over the same attribute words, so image-text alignment
is learnable by construction and ground truth is known exactly.

Every stochastic operation takes an explicit numpy Generator; nothing in
this module touches global randomness.
"""

from __future__ import annotations

import dataclasses
import json
import re
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .fusion import MaskedPositions

RESERVED_TOKENS = ("[PAD]", "[SOS]", "[EOS]", "[MASK]", "[UNK]")
PAD_ID, SOS_ID, EOS_ID, MASK_ID, UNK_ID = range(5)

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclasses.dataclass
class Vocab:
    """Token<->id bijection with the five reserved ids up front."""
    id_to_token: list[str]
    token_to_id: dict[str, int]

    def __post_init__(self):
        if len(self.id_to_token) < 6:
            raise ContractError("vocabulary needs at least one content token")
        if self.id_to_token[:5] != list(RESERVED_TOKENS):
            raise ContractError(f"first five ids must be {RESERVED_TOKENS}")
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("token<->id mapping is not a bijection")

    @classmethod
    def build(cls, texts) -> "Vocab":
        words = sorted({w for text in texts for w in _WORD_RE.findall(text.lower())})
        id_to_token = list(RESERVED_TOKENS) + words
        return cls(id_to_token, {tok: i for i, tok in enumerate(id_to_token)})

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_word(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    @staticmethod
    def is_special(token_id: int) -> bool:
        return token_id < len(RESERVED_TOKENS)

    @property
    def content_ids(self) -> range:
        return range(len(RESERVED_TOKENS), self.size)


def tokenize(text: str, vocab: Vocab, max_len: int) -> np.ndarray:
    """Lower-case, split on non-alphanumerics, bracket, truncate, pad.

    The output is always exactly ``max_len`` ids. Oversized captions keep
    their first ``max_len - 2`` words with [EOS] as the final id.
    """
    if not text or not text.strip():
        raise ContractError("cannot tokenize empty text")
    words = _WORD_RE.findall(text.lower())
    ids = [vocab.encode_word(w) for w in words][: max_len - 2]
    seq = [SOS_ID] + ids + [EOS_ID]
    seq += [PAD_ID] * (max_len - len(seq))
    return np.asarray(seq, dtype=np.int64)


@dataclasses.dataclass
class MaskedCaption:
    input_ids: np.ndarray
    masked: MaskedPositions


def mask_tokens(ids: np.ndarray, vocab: Vocab, rng: np.random.Generator,
                p_mask: float = 0.15, mask_prob: float = 0.8,
                random_prob: float = 0.1) -> MaskedCaption:
    """BERT-style random masking over the non-special positions.

    Each content token is independently selected with probability
    ``p_mask``; a selected token becomes [MASK] with ``mask_prob``, a random
    content token with ``random_prob``, and stays unchanged otherwise. All
    selected positions are recorded as prediction targets, including the
    unchanged ones. Reserved ids are never selected.
    """
    ids = np.asarray(ids, dtype=np.int64)
    out = ids.copy()
    positions: list[int] = []
    originals: list[int] = []
    for i in range(len(ids)):
        if Vocab.is_special(ids[i]):
            continue
        if rng.random() >= p_mask:
            continue
        positions.append(i)
        originals.append(int(ids[i]))
        r = rng.random()
        if r < mask_prob:
            out[i] = MASK_ID
        elif r < mask_prob + random_prob:
            out[i] = int(rng.integers(len(RESERVED_TOKENS), vocab.size))
    return MaskedCaption(out, MaskedPositions(tuple(positions), tuple(originals)))


# -- image augmentation -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_pad: int = 2          # production-scale runs use 10
    erase_prob: float = 0.5
    erase_frac: tuple[float, float] = (0.05, 0.25)  # erased area fraction range


def augment_image(image: np.ndarray, rng: np.random.Generator,
                  config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Horizontal flip, pad-and-random-crop, random erasing, in that order.

    Output shape always equals input shape; fills stay inside [0, 1] so the
    value range of unit-range inputs is preserved.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w, c = img.shape
    if rng.random() < config.flip_prob:
        img = img[:, ::-1, :].copy()
    if config.crop_pad > 0:
        pad = config.crop_pad
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        img = padded[top:top + h, left:left + w, :].copy()
    if rng.random() < config.erase_prob:
        frac = rng.uniform(*config.erase_frac)
        area = frac * h * w
        aspect = rng.uniform(0.5, 2.0)
        eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        img[top:top + eh, left:left + ew, :] = rng.uniform(0.0, 1.0, size=(eh, ew, c))
    return img


# -- annotations --------------------------------------------------------------------


@dataclasses.dataclass
class AnnotationRecord:
    identity_id: int
    image_ref: str | dict  # file path, or inline synthetic rendering spec
    captions: list[str]
    split: str = "train"

    def validate(self) -> None:
        if self.identity_id < 0:
            raise ContractError(f"identity_id must be nonnegative, got {self.identity_id}")
        if not self.captions:
            raise ContractError("record needs at least one caption")
        if not self.split:
            raise ContractError("record needs a split name")


def _record_to_obj(rec: AnnotationRecord) -> dict:
    obj: dict = {"id": rec.identity_id, "captions": list(rec.captions), "split": rec.split}
    if isinstance(rec.image_ref, str):
        obj["img_path"] = rec.image_ref
    else:
        obj["synthetic"] = rec.image_ref
    return obj


def _record_from_obj(obj: dict) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise ParseError("record is not an object")
    for key in ("id", "captions", "split"):
        if key not in obj:
            raise ParseError(f"record missing {key!r}")
    if "img_path" in obj:
        ref: str | dict = str(obj["img_path"])
    elif "synthetic" in obj:
        ref = dict(obj["synthetic"])
    else:
        raise ParseError("record needs either 'img_path' or 'synthetic'")
    captions = obj["captions"]
    if not isinstance(captions, list) or not all(isinstance(cap, str) for cap in captions):
        raise ParseError("'captions' must be a list of strings")
    rec = AnnotationRecord(int(obj["id"]), ref, list(captions), str(obj["split"]))
    rec.validate()
    return rec


def save_annotations(path, records: list[AnnotationRecord]) -> None:
    payload = [_record_to_obj(r) for r in records]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_annotations(path) -> list[AnnotationRecord]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, list):
        raise ParseError(f"{path} must hold a JSON array of records")
    records = []
    for i, obj in enumerate(payload):
        try:
            records.append(_record_from_obj(obj))
        except (ParseError, ContractError, TypeError, ValueError) as e:
            raise ParseError(f"record {i} in {path}: {e}") from e
    return records


def validate_records(records: list[AnnotationRecord]) -> None:
    for i, rec in enumerate(records):
        try:
            rec.validate()
        except ContractError as e:
            raise ContractError(f"record {i}: {e}") from e


def split_records(records: list[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    out: dict[str, list[AnnotationRecord]] = {}
    for rec in records:
        out.setdefault(rec.split, []).append(rec)
    return out


# -- synthetic dataset ---------------------------------------------------------------

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.45, 0.45, 0.45),
}
COLORS = tuple(COLOR_RGB)
ACCESSORIES = ("hat", "bag", "scarf", "backpack")

_SKIN = (0.80, 0.65, 0.50)
_SHOE = (0.20, 0.18, 0.16)
_MARKER = (0.60, 0.35, 0.15)  # accessories share a color; position tells them apart

CAPTION_TEMPLATES = (
    "a person wearing a {shirt} shirt and {pants} pants with a {accessory}",
    "someone dressed in a {shirt} top and {pants} trousers carrying a {accessory}",
    "the person has a {shirt} shirt with {pants} pants and a {accessory}",
)


def attribute_combinations() -> list[dict]:
    return [
        {"shirt": s, "pants": p, "accessory": a}
        for s in COLORS for p in COLORS for a in ACCESSORIES
    ]


def render_image(spec: dict) -> np.ndarray:
    """Deterministic procedural rendering of a synthetic image spec."""
    attrs = spec["attrs"]
    h, w, c = (int(x) for x in spec.get("shape", (32, 16, 3)))
    if c != 3:
        raise ContractError("synthetic rendering needs 3 channels")
    img = np.zeros((h, w, 3))
    head_end = max(1, h * 3 // 16)
    shirt_end = max(head_end + 1, h * 9 // 16)
    pants_end = max(shirt_end + 1, h * 14 // 16)
    img[:head_end] = _SKIN
    img[head_end:shirt_end] = COLOR_RGB[attrs["shirt"]]
    img[shirt_end:pants_end] = COLOR_RGB[attrs["pants"]]
    img[pants_end:] = _SHOE
    acc = attrs["accessory"]
    if acc == "hat":
        img[: max(1, head_end // 2), :] = _MARKER
    elif acc == "scarf":
        img[head_end:head_end + max(1, h // 10), :] = _MARKER
    elif acc == "bag":
        img[shirt_end - h // 8: pants_end, : max(1, w // 4)] = _MARKER
    elif acc == "backpack":
        img[head_end + h // 16: shirt_end, w - max(1, w // 4):] = _MARKER
    else:
        raise ContractError(f"unknown accessory {acc!r}")
    noise_rng = np.random.default_rng(int(spec["noise_seed"]))
    img = img + noise_rng.normal(0.0, float(spec.get("noise_std", 0.04)), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def captions_for(attrs: dict, count: int) -> list[str]:
    return [CAPTION_TEMPLATES[k % len(CAPTION_TEMPLATES)].format(**attrs) for k in range(count)]


def generate_synthetic(num_identities: int, images_per_id: int, captions_per_image: int,
                       rng: np.random.Generator, *, image_shape=(32, 16, 3),
                       val_images_per_id: int = 1,
                       noise_std: float = 0.04) -> list[AnnotationRecord]:
    """One record per (identity, image), with ground-truth-aligned captions.

    The last ``val_images_per_id`` images of each identity are assigned to
    the "val" split (capped so each identity keeps at least one training
    image). Identities draw distinct attribute tuples without replacement.
    """
    if min(num_identities, images_per_id, captions_per_image) < 1:
        raise ContractError("all synthetic dataset counts must be >= 1")
    combos = attribute_combinations()
    if num_identities > len(combos):
        raise ContractError(
            f"at most {len(combos)} distinct identities available, asked for {num_identities}")
    picks = rng.choice(len(combos), size=num_identities, replace=False)
    n_val = min(val_images_per_id, images_per_id - 1)
    records = []
    for identity, pick in enumerate(picks):
        attrs = combos[int(pick)]
        caps = captions_for(attrs, captions_per_image)
        for k in range(images_per_id):
            spec = {
                "attrs": dict(attrs),
                "noise_seed": int(rng.integers(0, 2**31 - 1)),
                "shape": list(image_shape),
                "noise_std": noise_std,
            }
            split = "val" if k >= images_per_id - n_val else "train"
            records.append(AnnotationRecord(identity, spec, list(caps), split))
    return records


def load_image(record: AnnotationRecord) -> np.ndarray:
    """Materialize the record's image as a float array in [0, 1]."""
    if isinstance(record.image_ref, dict):
        return render_image(record.image_ref)
    from PIL import Image

    with Image.open(record.image_ref) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr
