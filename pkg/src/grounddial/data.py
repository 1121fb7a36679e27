"""Dataset schema, tokenization, region-feature files, batching, and the
synthetic grounding task generator.

Dataset JSON: { "version": "1.0", "dialogs": [ { "image_id", "caption",
"rounds": [ { "question", "answer", "answer_options", "gt_index",
"relevance"?, "gt_grounding"? } ] } ] }.

Feature file (binary, little-endian): magic "VFEA", u32 version=1,
u32 num_images, then per image: u16 id-length, UTF-8 id, u32 mu, u32 d_v,
f32 data row-major.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import Tensor

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
RESERVED = ["<pad>", "<unk>", "<bos>", "<eos>"]

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^a-z0-9\s]")


class ParseError(ValueError):
    """Dataset JSON violates the documented schema; message carries the path."""


class MissingFeatureError(KeyError):
    """An image_id in the dataset has no block in the feature file."""


class FeatureFileError(ValueError):
    """Feature file is corrupt; message reports the byte offset."""


class GenerationError(ValueError):
    """Synthetic config cannot be satisfied."""


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace+punctuation tokenization."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijective token<->id map with fixed reserved ids PAD/UNK/BOS/EOS."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))

    def encode(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def encode_text(self, text: str) -> list[int]:
        return [self.encode(w) for w in tokenize(text)]

    def __len__(self) -> int:
        return len(self.id_to_token)


def tokenize_and_pad(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[bool]]:
    """Token ids truncated to max_len, right-padded with PAD; mask marks real tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = vocab.encode_text(text)[:max_len]
    mask = [True] * len(ids) + [False] * (max_len - len(ids))
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return ids, mask


@dataclass
class Round:
    question: str
    answer: str
    candidate_texts: list[str]
    gt_index: int
    question_tokens: list[int] = field(default_factory=list)
    answer_tokens: list[int] = field(default_factory=list)
    candidates: list[list[int]] = field(default_factory=list)
    relevance: Optional[list[float]] = None
    gt_grounding: Optional[list[int]] = None


@dataclass
class DialogExample:
    image_id: str
    caption: str
    rounds: list[Round]
    caption_tokens: list[int] = field(default_factory=list)
    region_features: Optional[Tensor] = None

    @property
    def gt_grounding(self) -> list[Optional[list[int]]]:
        return [r.gt_grounding for r in self.rounds]


@dataclass
class DialogDataset:
    examples: list[DialogExample]
    vocab: Vocabulary
    split: str

    def units(self) -> list[tuple[int, int]]:
        """All (example_index, round_index) training units in file order."""
        return [(i, t) for i, ex in enumerate(self.examples) for t in range(len(ex.rounds))]


# ---------------------------------------------------------------------------
# dataset loading

def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ParseError(f"{path}: {msg}")


def _parse_round(obj, path: str) -> Round:
    _expect(isinstance(obj, dict), path, "round must be an object")
    for key in ("question", "answer", "answer_options", "gt_index"):
        _expect(key in obj, path, f"missing key {key!r}")
    options = obj["answer_options"]
    _expect(isinstance(options, list) and options, f"{path}.answer_options", "must be a non-empty list")
    gt = obj["gt_index"]
    _expect(isinstance(gt, int) and 0 <= gt < len(options),
            f"{path}.gt_index", f"must be in [0, {len(options)})")
    relevance = obj.get("relevance")
    if relevance is not None:
        _expect(isinstance(relevance, list) and len(relevance) == len(options),
                f"{path}.relevance", "must align with answer_options")
        _expect(all(0.0 <= float(r) <= 1.0 for r in relevance),
                f"{path}.relevance", "entries must lie in [0, 1]")
        _expect(float(relevance[gt]) >= max(float(r) for r in relevance) - 1e-12,
                f"{path}.relevance", "gt_index relevance must be maximal or tied-maximal")
    grounding = obj.get("gt_grounding")
    if grounding is not None:
        _expect(isinstance(grounding, list) and all(isinstance(i, int) for i in grounding),
                f"{path}.gt_grounding", "must be a list of region indices")
    return Round(
        question=str(obj["question"]),
        answer=str(obj["answer"]),
        candidate_texts=[str(o) for o in options],
        gt_index=gt,
        relevance=[float(r) for r in relevance] if relevance is not None else None,
        gt_grounding=list(grounding) if grounding is not None else None,
    )


def load_dataset(path, split: str = "train", features_path=None,
                 vocab: Optional[Vocabulary] = None) -> DialogDataset:
    """Materialize a dataset file; example order is file order.

    When `vocab` is None a vocabulary is built from this file's text; pass
    the training vocabulary for val/test so ids line up. `features_path`
    defaults to features.bin next to the dataset file.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"$: not valid JSON ({e})") from e
    _expect(isinstance(raw, dict), "$", "top level must be an object")
    _expect("dialogs" in raw, "$", "missing key 'dialogs'")
    declared = raw.get("split")
    if declared is not None and declared != split:
        raise ParseError(f"$.split: file says {declared!r}, caller asked for {split!r}")
    dialogs = raw["dialogs"]
    _expect(isinstance(dialogs, list), "$.dialogs", "must be a list")

    examples: list[DialogExample] = []
    for i, d in enumerate(dialogs):
        dpath = f"$.dialogs[{i}]"
        _expect(isinstance(d, dict), dpath, "dialog must be an object")
        for key in ("image_id", "caption", "rounds"):
            _expect(key in d, dpath, f"missing key {key!r}")
        rounds = [_parse_round(r, f"{dpath}.rounds[{j}]") for j, r in enumerate(d["rounds"])]
        examples.append(DialogExample(image_id=str(d["image_id"]), caption=str(d["caption"]), rounds=rounds))

    if vocab is None:
        texts: list[str] = []
        for ex in examples:
            texts.append(ex.caption)
            for r in ex.rounds:
                texts.append(r.question)
                texts.append(r.answer)
                texts.extend(r.candidate_texts)
        vocab = Vocabulary.from_texts(texts)

    for ex in examples:
        ex.caption_tokens = vocab.encode_text(ex.caption)
        for r in ex.rounds:
            r.question_tokens = vocab.encode_text(r.question)
            r.answer_tokens = vocab.encode_text(r.answer)
            r.candidates = [vocab.encode_text(c) for c in r.candidate_texts]

    if features_path is None:
        features_path = path.parent / "features.bin"
    features_path = Path(features_path)
    if features_path.exists():
        feats = load_features(features_path)
        for ex in examples:
            if ex.image_id not in feats:
                raise MissingFeatureError(f"no features for image_id {ex.image_id!r} in {features_path}")
            ex.region_features = feats[ex.image_id]

    return DialogDataset(examples=examples, vocab=vocab, split=split)


# ---------------------------------------------------------------------------
# region feature files

_MAGIC = b"VFEA"


def write_features(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, len(features)))
        for image_id, block in features.items():
            arr = np.ascontiguousarray(block, dtype="<f4")
            if arr.ndim != 2:
                raise ValueError(f"feature block for {image_id!r} must be [mu, d_v]")
            ident = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_features(path) -> dict[str, Tensor]:
    """Read a feature file into image_id -> Tensor[mu, d_v] (float64)."""
    data = Path(path).read_bytes()

    def need(offset: int, count: int) -> None:
        if offset + count > len(data):
            raise FeatureFileError(f"{path}: truncated at byte {len(data)}, needed {offset + count}")

    need(0, 12)
    if data[:4] != _MAGIC:
        raise FeatureFileError(f"{path}: bad magic at byte 0")
    version, num_images = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise FeatureFileError(f"{path}: unsupported version {version} at byte 4")
    offset = 12
    out: dict[str, Tensor] = {}
    for _ in range(num_images):
        need(offset, 2)
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        need(offset, id_len)
        image_id = data[offset:offset + id_len].decode("utf-8")
        offset += id_len
        need(offset, 8)
        mu, d_v = struct.unpack_from("<II", data, offset)
        offset += 8
        count = mu * d_v
        need(offset, 4 * count)
        block = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        out[image_id] = Tensor(block.astype(np.float64).reshape(mu, d_v))
    return out


# ---------------------------------------------------------------------------
# synthetic grounding task

COLOR_WORDS = ["red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "gray", "cyan"]
SHAPE_WORDS = ["circle", "square", "triangle", "star", "diamond", "hexagon", "oval", "cross", "heart", "ring"]


@dataclass
class SyntheticConfig:
    num_images: int = 500
    mu: int = 8                 # objects per image
    num_colors: int = 6
    num_shapes: int = 6
    rounds: int = 3
    candidates: int = 10
    noise: float = 0.1          # gaussian feature noise scale, in [0, 1]
    d_v: int = 16
    seed: int = 7

    def validate(self) -> None:
        for name in ("num_images", "mu", "num_colors", "num_shapes", "rounds", "candidates", "d_v"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise GenerationError("noise must lie in [0, 1]")
        if self.mu > self.num_colors * self.num_shapes:
            raise GenerationError(
                f"cannot place {self.mu} objects with unique (color, shape) pairs: "
                f"only {self.num_colors}x{self.num_shapes} combinations exist"
            )
        if self.d_v < self.num_colors + self.num_shapes:
            raise GenerationError("d_v too small for one-hot color+shape coding")
        if self.candidates > self.num_colors * self.num_shapes + self.num_colors + self.num_shapes:
            raise GenerationError("candidate count exceeds the distinct answers the vocabulary can supply")


def _attribute_words(cfg: SyntheticConfig) -> tuple[list[str], list[str]]:
    colors = [COLOR_WORDS[i] if i < len(COLOR_WORDS) else f"color{i}" for i in range(cfg.num_colors)]
    shapes = [SHAPE_WORDS[i] if i < len(SHAPE_WORDS) else f"shape{i}" for i in range(cfg.num_shapes)]
    return colors, shapes


def _sample_objects(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[list[tuple[int, int]], list[int]]:
    """Distinct (color, shape) objects with >= cfg.rounds referable targets.

    Targets are doubly unique when the attribute space allows it: both their
    color and their shape occur exactly once in the image, so the question
    (naming one attribute) identifies exactly one object AND the answer (the
    other attribute) matches no other object. Distractor objects draw from
    the remaining attribute values only. When the grid is too tight for that
    construction, targets fall back to single-attribute uniqueness.
    """
    r = cfg.rounds
    nc, ns, mu = cfg.num_colors, cfg.num_shapes, cfg.mu
    rest = mu - r
    balanced_ok = (
        r <= min(nc, ns) and rest >= max(nc - r, ns - r) >= 1
        and rest <= (nc - r) * (ns - r)
    )
    if balanced_ok:
        # balanced inventory: every color and every shape appears in the
        # image, so attribute histograms are constant across images and
        # carry no answer information; targets stay doubly unique
        colors = [int(c) for c in rng.permutation(nc)]
        shapes = [int(s) for s in rng.permutation(ns)]
        objects = list(zip(colors[:r], shapes[:r]))  # doubly-unique targets
        rc, rs = colors[r:], shapes[r:]
        want_c = {c: rest // len(rc) + (1 if i < rest % len(rc) else 0)
                  for i, c in enumerate(rc)}
        want_s = {s: rest // len(rs) + (1 if i < rest % len(rs) else 0)
                  for i, s in enumerate(rs)}
        filler: list[tuple[int, int]] = []
        for _ in range(rest):
            c = max(want_c, key=lambda k: (want_c[k], -k))
            choices = sorted((s for s in rs if want_s[s] > 0 and (c, s) not in filler),
                             key=lambda s: (-want_s[s], s))
            if not choices:
                choices = sorted((s for s in rs if (c, s) not in filler))
            s = choices[0]
            filler.append((c, s))
            want_c[c] -= 1
            want_s[s] = max(want_s[s] - 1, 0)
        objects += filler
        order = [int(i) for i in rng.permutation(mu)]
        objects = [(int(objects[i][0]), int(objects[i][1])) for i in order]
        referable = [pos for pos, i in enumerate(order) if i < r]
        return objects, referable
    if r <= min(nc, ns) and rest <= (nc - r) * (ns - r) and mu >= r:
        colors = list(rng.permutation(nc))
        shapes = list(rng.permutation(ns))
        objects = list(zip(colors[:r], shapes[:r]))  # doubly-unique targets
        rest_pairs = [(c, s) for c in colors[r:] for s in shapes[r:]]
        extra = rng.choice(len(rest_pairs), size=rest, replace=False)
        objects += [rest_pairs[int(k)] for k in extra]
        order = [int(i) for i in rng.permutation(mu)]
        objects = [(int(objects[i][0]), int(objects[i][1])) for i in order]
        referable = [pos for pos, i in enumerate(order) if i < r]
        return objects, referable

    n_pairs = cfg.num_colors * cfg.num_shapes
    for _ in range(500):
        chosen = rng.choice(n_pairs, size=cfg.mu, replace=False)
        objects = [(int(p) // cfg.num_shapes, int(p) % cfg.num_shapes) for p in chosen]
        color_counts = np.bincount([c for c, _ in objects], minlength=cfg.num_colors)
        shape_counts = np.bincount([s for _, s in objects], minlength=cfg.num_shapes)
        referable = [
            i for i, (c, s) in enumerate(objects)
            if color_counts[c] == 1 or shape_counts[s] == 1
        ]
        if len(referable) >= cfg.rounds:
            return objects, referable
    raise GenerationError(
        f"could not sample {cfg.mu} objects with {cfg.rounds} uniquely referable ones; "
        "increase colors/shapes or lower rounds"
    )


def _make_round(cfg, rng, objects, target_idx, colors, shapes,
                color_counts, shape_counts) -> dict:
    c, s = objects[target_idx]
    ask_shape_ok = color_counts[c] == 1
    ask_color_ok = shape_counts[s] == 1
    if ask_shape_ok and ask_color_ok:
        ask_shape = bool(rng.integers(2))
    else:
        ask_shape = ask_shape_ok
    if ask_shape:
        question = f"what shape is the {colors[c]} thing ?"
        answer = shapes[s]
        same_cat = [shapes[os] for oc, os in objects if (oc, os) != (c, s)]
        other_cat = [colors[oc] for oc, os in objects if (oc, os) != (c, s)]
        vocab_same, vocab_other = shapes, colors
    else:
        question = f"what color is the {shapes[s]} ?"
        answer = colors[c]
        same_cat = [colors[oc] for oc, os in objects if (oc, os) != (c, s)]
        other_cat = [shapes[os] for oc, os in objects if (oc, os) != (c, s)]
        vocab_same, vocab_other = colors, shapes

    # candidate pool, most plausible first: gt word, same-category words of
    # other objects, this image's other-category words, then unused
    # attribute vocabulary, then absent (color, shape) pair names as filler
    def dedup(words):
        seen, out = set(), []
        for w in words:
            if w != answer and w not in seen:
                seen.add(w)
                out.append(w)
        return out

    same_cat = dedup(same_cat)
    other_cat = dedup(other_cat)
    rng.shuffle(same_cat)
    rng.shuffle(other_cat)
    rest = dedup([w for w in vocab_same + vocab_other if w not in set(same_cat) | set(other_cat)])
    rng.shuffle(rest)
    pool = [answer] + same_cat + other_cat + rest
    if len(pool) < cfg.candidates:
        present = {(oc, os) for oc, os in objects}
        absent = [f"{colors[pc]} {shapes[ps]}" for pc in range(cfg.num_colors)
                  for ps in range(cfg.num_shapes) if (pc, ps) not in present]
        rng.shuffle(absent)
        pool += absent
    options = pool[:cfg.candidates]
    order = rng.permutation(len(options))
    options = [options[int(k)] for k in order]
    gt_index = options.index(answer)
    same_set = set(same_cat)
    relevance = [1.0 if w == answer else (0.5 if w in same_set else 0.0) for w in options]
    return {
        "question": question,
        "answer": answer,
        "answer_options": options,
        "gt_index": gt_index,
        "relevance": relevance,
        "gt_grounding": [int(target_idx)],
    }


def generate_synthetic_raw(cfg: SyntheticConfig) -> tuple[dict, dict[str, np.ndarray]]:
    """Build the dataset dict and feature map; a pure function of cfg."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    colors, shapes = _attribute_words(cfg)
    dialogs = []
    features: dict[str, np.ndarray] = {}
    for img in range(cfg.num_images):
        objects, referable = _sample_objects(cfg, rng)
        color_counts = np.bincount([c for c, _ in objects], minlength=cfg.num_colors)
        shape_counts = np.bincount([s for _, s in objects], minlength=cfg.num_shapes)

        block = np.zeros((cfg.mu, cfg.d_v))
        for i, (c, s) in enumerate(objects):
            block[i, c] = 1.0
            block[i, cfg.num_colors + s] = 1.0
        block += cfg.noise * rng.normal(size=block.shape)
        image_id = f"synth{img:06d}"
        # stored as f32 in the feature file; quantize now so that generate ->
        # write -> load is an exact round-trip
        features[image_id] = block.astype(np.float32).astype(np.float64)

        targets = [int(i) for i in rng.permutation(referable)[:cfg.rounds]]
        rounds = [
            _make_round(cfg, rng, objects, t, colors, shapes, color_counts, shape_counts)
            for t in targets
        ]
        # a bland caption on purpose: an image-identifying caption would let
        # the decoder memorize answers through the context channel instead of
        # grounding, defeating the point of the task
        caption = f"a picture with {cfg.mu} colorful shapes"
        dialogs.append({"image_id": image_id, "caption": caption, "rounds": rounds})
    dataset = {"version": "1.0", "dialogs": dialogs}
    return dataset, features


def generate_synthetic(cfg: SyntheticConfig, split: str = "train") -> DialogDataset:
    """In-memory dataset with features attached; deterministic given cfg."""
    raw, features = generate_synthetic_raw(cfg)
    ds = _dataset_from_raw(raw, split)
    feats = {k: Tensor(v) for k, v in features.items()}
    for ex in ds.examples:
        ex.region_features = feats[ex.image_id]
    return ds


def _dataset_from_raw(raw: dict, split: str) -> DialogDataset:
    examples = []
    for d in raw["dialogs"]:
        rounds = [
            Round(
                question=r["question"],
                answer=r["answer"],
                candidate_texts=list(r["answer_options"]),
                gt_index=r["gt_index"],
                relevance=list(r["relevance"]) if r.get("relevance") is not None else None,
                gt_grounding=list(r["gt_grounding"]) if r.get("gt_grounding") is not None else None,
            )
            for r in d["rounds"]
        ]
        examples.append(DialogExample(image_id=d["image_id"], caption=d["caption"], rounds=rounds))
    texts = []
    for ex in examples:
        texts.append(ex.caption)
        for r in ex.rounds:
            texts.extend([r.question, r.answer, *r.candidate_texts])
    vocab = Vocabulary.from_texts(texts)
    for ex in examples:
        ex.caption_tokens = vocab.encode_text(ex.caption)
        for r in ex.rounds:
            r.question_tokens = vocab.encode_text(r.question)
            r.answer_tokens = vocab.encode_text(r.answer)
            r.candidates = [vocab.encode_text(c) for c in r.candidate_texts]
    return DialogDataset(examples=examples, vocab=vocab, split=split)


def dump_dataset_json(dataset_dict: dict) -> str:
    """Canonical JSON text so identical configs give identical bytes."""
    return json.dumps(dataset_dict, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# batching

def batch_iterator(ds: DialogDataset, batch_size: int, seed: int,
                   shuffle: bool) -> Iterator[list[tuple[int, int]]]:
    """Yield batches of (example_index, round_index) units for one epoch.

    A seeded permutation when shuffle is on, file order otherwise; the final
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    units = ds.units()
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(units))
        units = [units[int(i)] for i in order]
    for start in range(0, len(units), batch_size):
        yield units[start:start + batch_size]
