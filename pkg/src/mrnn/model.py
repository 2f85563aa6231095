"""m-RNN configuration, parameters and forward computation.

Layer stack per time step (Full variant)::

    e1 = E1[word]                            embedding I (linear lookup)
    w  = W2 e1 + b2                          embedding II (linear)
    r  = relu(Ur r_prev + w + br)            recurrent
    m  = g2(Vw w + Vr r + VI image + bm)     multimodal
    y  = softmax(Vo m + bo)                  next-word distribution

The other variants drop or rewire individual connections; see `Variant`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

G2_SCALE = 1.7159
G2_SLOPE = 2.0 / 3.0

CHECKPOINT_MAGIC = b"MRNC"
CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    FULL = "full"
    RNN_BASE = "rnn-base"
    NO_EMB_INPUT = "no-emb-input"
    ONE_LAYER_EMB = "one-layer-emb"
    EMB_ONE_INPUT = "emb-one-input"
    VISUAL_IN_RNN = "visual-in-rnn"
    VISUAL_IN_RNN_BOTH = "visual-in-rnn-both"
    VISUAL_IN_RNN_BOTH_SHARED = "visual-in-rnn-both-shared"
    ELMAN = "elman"

    @property
    def image_at_multimodal(self) -> bool:
        return self in (
            Variant.FULL,
            Variant.NO_EMB_INPUT,
            Variant.ONE_LAYER_EMB,
            Variant.EMB_ONE_INPUT,
            Variant.VISUAL_IN_RNN_BOTH,
            Variant.VISUAL_IN_RNN_BOTH_SHARED,
        )

    @property
    def image_at_embedding(self) -> bool:
        return self in (
            Variant.VISUAL_IN_RNN,
            Variant.VISUAL_IN_RNN_BOTH,
            Variant.VISUAL_IN_RNN_BOTH_SHARED,
        )

    @property
    def uses_image(self) -> bool:
        return self.image_at_multimodal or self.image_at_embedding


@dataclass(frozen=True)
class MRnnConfig:
    vocab_size: int
    dim_image: int
    dim_embed1: int = 128
    dim_embed2: int = 256
    dim_recurrent: int = 256
    dim_multimodal: int = 512
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        dims = (
            self.vocab_size,
            self.dim_image,
            self.dim_embed1,
            self.dim_embed2,
            self.dim_recurrent,
            self.dim_multimodal,
        )
        if any(int(d) != d or d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive integers: {dims}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must include the three reserved tokens")
        if self.dim_embed2 != self.dim_recurrent:
            raise ValueError("dim_embed2 must equal dim_recurrent (element-wise addition)")
        if (
            self.variant is Variant.VISUAL_IN_RNN_BOTH_SHARED
            and self.dim_multimodal < self.dim_recurrent
        ):
            raise ValueError("shared visual weights need dim_multimodal >= dim_recurrent")

    def with_variant(self, variant) -> "MRnnConfig":
        return replace(self, variant=Variant(variant))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor name -> shape for this variant, in canonical order."""
        M, D = self.vocab_size, self.dim_image
        e1, r, m = self.dim_embed1, self.dim_recurrent, self.dim_multimodal
        v = self.variant
        if v is Variant.ELMAN:
            return {"U": (r, M + r), "V": (M, r)}
        s: dict[str, tuple[int, ...]] = {}
        if v is Variant.ONE_LAYER_EMB:
            s["E"] = (M, r)
        else:
            s["E1"] = (M, e1)
            s["W2"] = (r, e1)
            s["b2"] = (r,)
        if v in (Variant.VISUAL_IN_RNN, Variant.VISUAL_IN_RNN_BOTH):
            s["VI1"] = (r, D)
        s["Ur"] = (r, r)
        s["br"] = (r,)
        if v is Variant.EMB_ONE_INPUT:
            s["Vw"] = (m, e1)
        elif v is not Variant.NO_EMB_INPUT:
            s["Vw"] = (m, r)
        s["Vr"] = (m, r)
        if v.image_at_multimodal:
            s["VI"] = (m, D)
        s["bm"] = (m,)
        s["Vo"] = (M, m)
        s["bo"] = (M,)
        return s


BIAS_NAMES = frozenset({"b2", "br", "bm", "bo"})


class Parameters(dict):
    """Name -> float64 array. A plain dict so optimizers can update it in place."""

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.items()})

    def squared_norm(self) -> float:
        return float(sum(np.dot(v.ravel(), v.ravel()) for v in self.values()))

    def count(self, names=None) -> int:
        names = self.keys() if names is None else names
        return int(sum(self[n].size for n in names))

    def embedding_weight_count(self) -> int:
        return self.count([n for n in ("E", "E1", "W2") if n in self])

    def zeros_like(self) -> "Parameters":
        return Parameters({k: np.zeros_like(v) for k, v in self.items()})


def init_parameters(config: MRnnConfig, seed: int, scale: float = 0.1) -> Parameters:
    """Weights i.i.d. uniform on [-scale, scale]; biases zero."""
    rng = np.random.default_rng(seed)
    params = Parameters()
    for name, shape in config.shapes().items():
        if name in BIAS_NAMES:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-scale, scale, size=shape)
    return params


def check_parameters(params: Parameters, config: MRnnConfig) -> None:
    shapes = config.shapes()
    if set(shapes) != set(params):
        raise ValueError(f"parameter names {sorted(params)} != expected {sorted(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != {shape}")


# --------------------------------------------------------------------------
# single-layer operations


def g2(x):
    return G2_SCALE * np.tanh(G2_SLOPE * x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    return z - np.log(np.exp(z).sum())


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def embed_word(params: Parameters, token_index: int) -> np.ndarray:
    """Word vector w(t) fed to the recurrent layer (without any image term)."""
    if "E" in params:
        table = params["E"]
    else:
        table = params["E1"]
    if not 0 <= token_index < table.shape[0]:
        raise IndexError(f"token index {token_index} out of range [0, {table.shape[0]})")
    if "E" in params:
        return table[token_index].copy()
    return params["W2"] @ table[token_index] + params["b2"]


def recurrent_step(params: Parameters, w_t: np.ndarray, r_prev: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, params["Ur"] @ r_prev + w_t + params["br"])


def multimodal_step(params: Parameters, w_t, r_t, image) -> np.ndarray:
    """m(t) = g2(Vw w + Vr r + VI I + bm); absent connections contribute nothing."""
    a = params["Vr"] @ r_t + params["bm"]
    if "Vw" in params and w_t is not None:
        a = a + params["Vw"] @ w_t
    if "VI" in params and image is not None:
        a = a + params["VI"] @ image
    return g2(a)


def softmax_output(params: Parameters, m_t: np.ndarray) -> np.ndarray:
    return softmax(params["Vo"] @ m_t + params["bo"])


def elman_step(params: Parameters, onehot_index: int, r_prev: np.ndarray):
    U, V = params["U"], params["V"]
    M = V.shape[0]
    if not 0 <= onehot_index < M:
        raise IndexError(f"token index {onehot_index} out of range [0, {M})")
    # U @ concat(onehot, r_prev) without materializing the one-hot
    r_t = sigmoid(U[:, onehot_index] + U[:, M:] @ r_prev)
    return r_t, softmax(V @ r_t)


# --------------------------------------------------------------------------
# stepping machinery shared by forward_sentence and the decoders


class ImageTerms(NamedTuple):
    """Image contributions that are constant over time steps."""

    to_embedding: np.ndarray | None
    to_multimodal: np.ndarray | None


class StepOut(NamedTuple):
    e1: np.ndarray | None
    w: np.ndarray | None
    r: np.ndarray
    m: np.ndarray | None
    logits: np.ndarray


def image_terms(params: Parameters, config: MRnnConfig, image) -> ImageTerms:
    v = config.variant
    if not v.uses_image:
        return ImageTerms(None, None)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.dim_image,):
        raise ValueError(f"image dimension {image.shape} != ({config.dim_image},)")
    to_m = params["VI"] @ image if v.image_at_multimodal else None
    if v is Variant.VISUAL_IN_RNN_BOTH_SHARED:
        to_e = to_m[: config.dim_recurrent]
    elif v.image_at_embedding:
        to_e = params["VI1"] @ image
    else:
        to_e = None
    return ImageTerms(to_e, to_m)


def initial_state(config: MRnnConfig) -> np.ndarray:
    return np.zeros(config.dim_recurrent)


def step(params: Parameters, config: MRnnConfig, token: int, r_prev, img: ImageTerms) -> StepOut:
    v = config.variant
    if v is Variant.ELMAN:
        U, V = params["U"], params["V"]
        M = config.vocab_size
        r = sigmoid(U[:, token] + U[:, M:] @ r_prev)
        return StepOut(None, None, r, None, V @ r)
    if v is Variant.ONE_LAYER_EMB:
        e1 = None
        w = params["E"][token]
    else:
        e1 = params["E1"][token]
        w = params["W2"] @ e1 + params["b2"]
    if img.to_embedding is not None:
        w = w + img.to_embedding
    r = np.maximum(0.0, params["Ur"] @ r_prev + w + params["br"])
    a = params["Vr"] @ r + params["bm"]
    if v is Variant.EMB_ONE_INPUT:
        a = a + params["Vw"] @ e1
    elif v is not Variant.NO_EMB_INPUT:
        a = a + params["Vw"] @ w
    if img.to_multimodal is not None:
        a = a + img.to_multimodal
    m = g2(a)
    return StepOut(e1, w, r, m, params["Vo"] @ m + params["bo"])


@dataclass
class ForwardTrace:
    """Activations of every layer at each predicted position.

    Row t holds the step that consumed ``inputs[t]`` and predicts ``targets[t]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    image: np.ndarray | None
    e1: np.ndarray | None
    w: np.ndarray | None
    r: np.ndarray
    m: np.ndarray | None
    y: np.ndarray
    log_y: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def target_log_probs(self) -> np.ndarray:
        """Natural-log probability of each target word."""
        return self.log_y[np.arange(len(self)), self.targets]


def forward_sentence(params: Parameters, config: MRnnConfig, image, caption) -> ForwardTrace:
    caption = np.asarray(caption, dtype=np.int64)
    if caption.ndim != 1 or len(caption) < 2:
        raise ValueError("caption must contain at least start and end indices")
    if caption.min() < 0 or caption.max() >= config.vocab_size:
        raise IndexError("caption index out of vocabulary range")
    img = image_terms(params, config, image)
    T = len(caption) - 1
    r_prev = initial_state(config)
    outs = []
    for t in range(T):
        out = step(params, config, int(caption[t]), r_prev, img)
        outs.append(out)
        r_prev = out.r

    def stack(attr):
        vals = [getattr(o, attr) for o in outs]
        return None if vals[0] is None else np.stack(vals)

    logits = stack("logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = np.exp(shifted)
    y /= y.sum(axis=1, keepdims=True)
    return ForwardTrace(
        inputs=caption[:-1],
        targets=caption[1:],
        image=None if image is None else np.asarray(image, dtype=np.float64),
        e1=stack("e1"),
        w=stack("w"),
        r=stack("r"),
        m=stack("m"),
        y=y,
        log_y=log_y,
    )


def refine_feature(params: Parameters, image) -> np.ndarray:
    """Project an image through the multimodal image weights: g2(VI I), no bias."""
    if "VI" not in params:
        raise ValueError("model has no multimodal image weights to refine with")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (params["VI"].shape[1],):
        raise ValueError(f"image dimension {image.shape} != ({params['VI'].shape[1]},)")
    return g2(params["VI"] @ image)


# --------------------------------------------------------------------------
# checkpoint files

_TAG_INT, _TAG_FLOAT, _TAG_STR = 0, 1, 2


def _pack_fields(meta: dict) -> bytes:
    out = bytearray(struct.pack("<H", len(meta)))
    for key, value in meta.items():
        k = key.encode("utf-8")
        out += struct.pack("<H", len(k)) + k
        if isinstance(value, bool) or isinstance(value, (int, np.integer)):
            out += struct.pack("<Bq", _TAG_INT, int(value))
        elif isinstance(value, float):
            out += struct.pack("<Bd", _TAG_FLOAT, value)
        elif isinstance(value, str):
            v = value.encode("utf-8")
            out += struct.pack("<BI", _TAG_STR, len(v)) + v
        else:
            raise TypeError(f"cannot serialize field {key}={value!r}")
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        from .corpus import TruncatedFileError

        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"truncated checkpoint {self.path}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_fields(rd: _Reader) -> dict:
    from .corpus import FormatError

    (n,) = rd.unpack("<H")
    meta = {}
    for _ in range(n):
        (klen,) = rd.unpack("<H")
        key = rd.take(klen).decode("utf-8")
        (tag,) = rd.unpack("<B")
        if tag == _TAG_INT:
            (meta[key],) = rd.unpack("<q")
        elif tag == _TAG_FLOAT:
            (meta[key],) = rd.unpack("<d")
        elif tag == _TAG_STR:
            (vlen,) = rd.unpack("<I")
            meta[key] = rd.take(vlen).decode("utf-8")
        else:
            raise FormatError(f"unknown field tag {tag}")
    return meta


@dataclass
class Checkpoint:
    config: MRnnConfig
    params: Parameters
    extra_tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(
    path,
    config: MRnnConfig,
    params: Parameters,
    meta: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write MRNC checkpoint: config fields + free-form meta, then named f64 tensors."""
    check_parameters(params, config)
    header = {}
    for f in fields(config):
        val = getattr(config, f.name)
        header[f"config.{f.name}"] = val.value if isinstance(val, Variant) else int(val)
    for k, v in (meta or {}).items():
        header[k] = v
    tensors = list(params.items()) + list((extra_tensors or {}).items())
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += _pack_fields(header)
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    from .corpus import FormatError

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    rd = _Reader(path.read_bytes(), path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = _unpack_fields(rd)
    cfg_kwargs = {k[len("config.") :]: v for k, v in header.items() if k.startswith("config.")}
    meta = {k: v for k, v in header.items() if not k.startswith("config.")}
    try:
        config = MRnnConfig(**cfg_kwargs)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad config in checkpoint: {exc}") from exc
    (count,) = rd.unpack("<I")
    expected = config.shapes()
    params, extra = Parameters(), {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in expected:
            params[name] = arr
        else:
            extra[name] = arr
    if rd.pos != len(rd.data):
        raise FormatError(f"trailing bytes in checkpoint {path}")
    try:
        check_parameters(params, config)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return Checkpoint(config, params, extra, meta)
