"""Tokenization, vocabulary, caption encoding and dataset/feature-file IO."""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

START = "<s>"
END = "</s>"
UNK = "<unk>"

FEATURE_MAGIC = b"MRNF"
FEATURE_VERSION = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class FormatError(ValueError):
    """Bad magic bytes or unsupported version in a binary file."""


class DimensionMismatchError(ValueError):
    pass


class TruncatedFileError(ValueError):
    pass


def tokenize(sentence: str) -> list[str]:
    """Lowercase and split into word runs, each punctuation char its own token."""
    return _TOKEN_RE.findall(sentence.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index_of: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        index_of = {t: i for i, t in enumerate(tokens)}
        if len(index_of) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (START, END, UNK):
            if special not in index_of:
                raise ValueError(f"reserved token {special!r} missing")
        if any(not t or any(c.isspace() for c in t) for t in tokens):
            raise ValueError("tokens must be non-empty and whitespace-free")
        return cls(tokens, index_of)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def start_index(self) -> int:
        return self.index_of[START]

    @property
    def end_index(self) -> int:
        return self.index_of[END]

    @property
    def unknown_index(self) -> int:
        return self.index_of[UNK]

    def decode(self, indices: Iterable[int], strip: bool = True) -> list[str]:
        """Map indices back to surface tokens, dropping start/end when `strip`."""
        out = [self.tokens[i] for i in indices]
        if strip:
            out = [t for t in out if t not in (START, END)]
        return out


def build_vocabulary(captions: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Frequency-descending vocabulary (ties lexicographic) after the reserved tokens."""
    if len(captions) == 0:
        raise ValueError("empty corpus")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for cap in captions for tok in cap)
    reserved = (START, END, UNK)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in reserved),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary.from_tokens(reserved + tuple(kept))


def encode_caption(vocab: Vocabulary, tokens: Sequence[str]) -> tuple[int, ...]:
    unk = vocab.unknown_index
    body = []
    for t in tokens:
        i = vocab.index_of.get(t, unk)
        # a literal start/end token inside a caption is treated as OOV
        if i in (vocab.start_index, vocab.end_index):
            i = unk
        body.append(i)
    return (vocab.start_index, *body, vocab.end_index)


@dataclass
class CaptionedImage:
    id: str
    feature: np.ndarray
    captions: list[tuple[int, ...]]
    split: str = "train"
    raw_captions: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"non-finite feature for image {self.id}")
        if not self.captions:
            raise ValueError(f"image {self.id} has no captions")


class FeatureStore:
    """Fixed-dimension id -> feature vector map."""

    def __init__(self, dim: int, entries: dict[str, np.ndarray] | None = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._entries: dict[str, np.ndarray] = {}
        for k, v in (entries or {}).items():
            self.add(k, v)

    def add(self, image_id: str, vector) -> None:
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatchError(
                f"dimension mismatch: {image_id} has shape {v.shape}, store dim {self.dim}"
            )
        if image_id in self._entries:
            raise ValueError(f"duplicate id {image_id}")
        self._entries[image_id] = v

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self._entries[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        ids = self.ids() if ids is None else ids
        if not ids:
            return np.zeros((0, self.dim))
        return np.stack([self._entries[i] for i in ids])


def save_feature_store(store: FeatureStore, path) -> None:
    buf = bytearray()
    buf += FEATURE_MAGIC
    buf += struct.pack("<III", FEATURE_VERSION, len(store), store.dim)
    for image_id, vec in store.items():
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long: {image_id[:20]}...")
        buf += struct.pack("<H", len(raw)) + raw
        buf += np.asarray(vec, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_feature_store(path) -> FeatureStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    data = path.read_bytes()
    if len(data) < 16:
        if data[:4] != FEATURE_MAGIC[: len(data[:4])]:
            raise FormatError(f"bad magic in {path}")
        raise TruncatedFileError(f"truncated header in {path}")
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic in {path}: {data[:4]!r}")
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if dim == 0:
        raise FormatError("feature dimension is zero")
    store = FeatureStore(dim)
    pos = 16
    for k in range(count):
        if pos + 2 > len(data):
            raise TruncatedFileError(f"truncated at record {k} of {count}")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        end = pos + n + 4 * dim
        if end > len(data):
            raise TruncatedFileError(f"truncated at record {k} of {count}")
        try:
            image_id = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DimensionMismatchError(
                f"dimension mismatch: record {k} misaligned (undecodable id)"
            ) from exc
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + n).astype(np.float64)
        store.add(image_id, vec)
        pos = end
    if pos != len(data):
        raise DimensionMismatchError(
            f"dimension mismatch: {len(data) - pos} trailing bytes after {count} records of dim {dim}"
        )
    return store


def write_captions(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_captions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"caption file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(rec.get("image_id"), str) or not isinstance(rec.get("captions"), list):
                raise FormatError(f"{path}:{lineno}: missing image_id/captions")
            if rec.get("split", "train") not in ("train", "val", "test"):
                raise FormatError(f"{path}:{lineno}: bad split {rec.get('split')!r}")
            out.append(rec)
    return out


def assemble_dataset(
    records: Sequence[dict],
    store: FeatureStore,
    vocab: Vocabulary | None = None,
    min_count: int = 1,
) -> tuple[Vocabulary, list[CaptionedImage]]:
    """Join caption records with features. Vocabulary comes from train captions."""
    tokenized = [[tokenize(c) for c in rec["captions"]] for rec in records]
    if vocab is None:
        train_caps = [
            toks
            for rec, caps in zip(records, tokenized)
            if rec.get("split", "train") == "train"
            for toks in caps
        ]
        vocab = build_vocabulary(train_caps, min_count)
    images = []
    for rec, caps in zip(records, tokenized):
        if rec["image_id"] not in store:
            raise KeyError(f"no feature for image {rec['image_id']}")
        images.append(
            CaptionedImage(
                id=rec["image_id"],
                feature=store[rec["image_id"]],
                captions=[encode_caption(vocab, c) for c in caps],
                split=rec.get("split", "train"),
                raw_captions=caps,
            )
        )
    return vocab, images


def load_dataset(captions_path, features_path, vocab: Vocabulary | None = None):
    store = load_feature_store(features_path)
    records = read_captions(captions_path)
    vocab, images = assemble_dataset(records, store, vocab)
    return vocab, images, store


# --------------------------------------------------------------------------
# synthetic shapes corpus

COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star", "heart")
COUNT_WORDS = ("one", "two", "three")
NOISE_SIGMA = 0.05
_TEMPLATES = (
    "{n} {color} {shape}",
    "there {verb} {n} {color} {shape} .",
    "a picture of {n} {color} {shape}",
)


@dataclass(frozen=True)
class SyntheticAttributes:
    color: int
    shape: int
    count: int  # 1..3


def render_caption(attrs: SyntheticAttributes, template: int) -> str:
    shape = SHAPES[attrs.shape] + ("s" if attrs.count > 1 else "")
    return _TEMPLATES[template].format(
        n=COUNT_WORDS[attrs.count - 1],
        color=COLORS[attrs.color],
        shape=shape,
        verb="is" if attrs.count == 1 else "are",
    )


def synthetic_feature_dim() -> int:
    return len(COLORS) + len(SHAPES) + len(COUNT_WORDS)


def attribute_blocks(feature: np.ndarray) -> SyntheticAttributes:
    """Recover attributes from a synthetic feature by per-block argmax."""
    c, s = len(COLORS), len(SHAPES)
    return SyntheticAttributes(
        color=int(np.argmax(feature[:c])),
        shape=int(np.argmax(feature[c : c + s])),
        count=int(np.argmax(feature[c + s :])) + 1,
    )


def generate_synthetic_dataset(
    n_images: int,
    seed: int,
    captions_per_image: int = 3,
    n_test: int = 0,
    n_val: int = 0,
) -> tuple[FeatureStore, list[dict]]:
    """Random colored-shape scenes as attribute one-hots plus Gaussian noise.

    Returns the feature store and caption records in the caption-file schema.
    The last `n_test` images go to the test split, the `n_val` before them to val.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not 1 <= captions_per_image <= len(_TEMPLATES):
        raise ValueError(f"captions_per_image must be in 1..{len(_TEMPLATES)}")
    if n_test + n_val > n_images:
        raise ValueError("more held-out images than images")
    rng = np.random.default_rng(seed)
    dim = synthetic_feature_dim()
    store = FeatureStore(dim)
    records = []
    width = len(str(n_images - 1))
    for k in range(n_images):
        attrs = SyntheticAttributes(
            color=int(rng.integers(len(COLORS))),
            shape=int(rng.integers(len(SHAPES))),
            count=int(rng.integers(1, 4)),
        )
        feat = np.zeros(dim)
        feat[attrs.color] = 1.0
        feat[len(COLORS) + attrs.shape] = 1.0
        feat[len(COLORS) + len(SHAPES) + attrs.count - 1] = 1.0
        feat += rng.normal(0.0, NOISE_SIGMA, size=dim)
        feat = feat.astype(np.float32).astype(np.float64)
        assert attribute_blocks(feat) == attrs, "noise flipped an attribute block"
        templates = rng.permutation(len(_TEMPLATES))[:captions_per_image]
        image_id = f"syn{k:0{width}d}"
        if k >= n_images - n_test:
            split = "test"
        elif k >= n_images - n_test - n_val:
            split = "val"
        else:
            split = "train"
        store.add(image_id, feat)
        records.append(
            {
                "image_id": image_id,
                "split": split,
                "captions": [render_caption(attrs, int(t)) for t in sorted(templates)],
            }
        )
    return store, records


def synthetic_images(
    n_images: int, seed: int, captions_per_image: int = 3, n_test: int = 0, n_val: int = 0
) -> tuple[Vocabulary, list[CaptionedImage], FeatureStore]:
    store, records = generate_synthetic_dataset(n_images, seed, captions_per_image, n_test, n_val)
    vocab, images = assemble_dataset(records, store)
    return vocab, images, store


def split(images: Sequence[CaptionedImage], name: str) -> list[CaptionedImage]:
    return [im for im in images if im.split == name]
