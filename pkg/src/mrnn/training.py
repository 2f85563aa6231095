"""Perplexity cost, backpropagation through time, gradient checking and SGD."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import CaptionedImage
from .model import (
    G2_SCALE,
    G2_SLOPE,
    ForwardTrace,
    MRnnConfig,
    Parameters,
    Variant,
    forward_sentence,
    init_parameters,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class DivergenceError(RuntimeError):
    pass


def sentence_perplexity(step_probs: Sequence[float]) -> float:
    """2 ** (mean negative log2 probability) of one sentence's predicted words."""
    p = np.asarray(step_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("need at least one predicted word")
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("step probabilities must lie in (0, 1]")
    return float(2.0 ** (-np.mean(np.log2(p))))


def sentence_bits(trace: ForwardTrace) -> float:
    """Summed negative log2 probability of the targets, i.e. L * log2 PPL."""
    return float(-trace.target_log_probs().sum() / LN2)


def sentence_pairs(images: Sequence[CaptionedImage]):
    for im in images:
        for cap in im.captions:
            yield im, cap


@dataclass(frozen=True)
class CostReport:
    avg_bits_per_word: float
    regularizer: float
    total: float
    n_words: int
    n_sentences: int

    @property
    def perplexity(self) -> float:
        return float(2.0**self.avg_bits_per_word)


def corpus_cost(params: Parameters, config: MRnnConfig, dataset, lam: float = 0.0) -> CostReport:
    """Average bits per predicted word plus lam * ||theta||^2."""
    bits, n_words, n_sent = 0.0, 0, 0
    for im, cap in sentence_pairs(dataset):
        trace = forward_sentence(params, config, im.feature, cap)
        bits += sentence_bits(trace)
        n_words += len(trace)
        n_sent += 1
    if n_sent == 0:
        raise ValueError("empty dataset")
    avg = bits / n_words
    reg = lam * params.squared_norm() if lam else 0.0
    return CostReport(avg, reg, avg + reg, n_words, n_sent)


def backward_sentence(
    params: Parameters, config: MRnnConfig, trace: ForwardTrace, targets=None
) -> Parameters:
    """Exact gradient of the summed log2 loss of one sentence, untruncated BPTT."""
    targets = trace.targets if targets is None else np.asarray(targets, dtype=np.int64)
    T = len(trace)
    if len(targets) != T:
        raise ValueError(f"{len(targets)} targets for a {T}-step trace")
    v = config.variant
    grads = params.zeros_like()

    dz = trace.y.copy()
    dz[np.arange(T), targets] -= 1.0
    dz /= LN2

    if v is Variant.ELMAN:
        return _backward_elman(params, config, trace, dz, grads)

    grads["Vo"] = dz.T @ trace.m
    grads["bo"] = dz.sum(axis=0)
    dm = dz @ params["Vo"]
    # g2'(a) = scale * slope * (1 - tanh^2) with tanh = m / scale
    da = dm * (G2_SCALE * G2_SLOPE) * (1.0 - (trace.m / G2_SCALE) ** 2)
    grads["bm"] = da.sum(axis=0)
    grads["Vr"] = da.T @ trace.r
    dr_from_m = da @ params["Vr"]

    if v is Variant.EMB_ONE_INPUT:
        grads["Vw"] = da.T @ trace.e1
        de1 = da @ params["Vw"]
        dw = np.zeros_like(trace.w)
    elif v is Variant.NO_EMB_INPUT:
        de1 = None
        dw = np.zeros_like(trace.w)
    else:
        grads["Vw"] = da.T @ trace.w
        de1 = None
        dw = da @ params["Vw"]

    # recurrence, newest step first
    Ur = params["Ur"]
    active = trace.r > 0
    dpre = np.zeros_like(trace.r)
    carry = np.zeros(config.dim_recurrent)
    for t in range(T - 1, -1, -1):
        d = (dr_from_m[t] + carry) * active[t]
        dpre[t] = d
        carry = d @ Ur
    r_prev = np.vstack([np.zeros((1, config.dim_recurrent)), trace.r[:-1]])
    grads["Ur"] = dpre.T @ r_prev
    grads["br"] = dpre.sum(axis=0)
    dw = dw + dpre

    image = trace.image
    if v.image_at_multimodal:
        grads["VI"] = np.outer(da.sum(axis=0), image)
    if v in (Variant.VISUAL_IN_RNN, Variant.VISUAL_IN_RNN_BOTH):
        grads["VI1"] = np.outer(dw.sum(axis=0), image)
    elif v is Variant.VISUAL_IN_RNN_BOTH_SHARED:
        grads["VI"][: config.dim_recurrent] += np.outer(dw.sum(axis=0), image)

    if v is Variant.ONE_LAYER_EMB:
        np.add.at(grads["E"], trace.inputs, dw)
        return grads

    grads["W2"] = dw.T @ trace.e1
    grads["b2"] = dw.sum(axis=0)
    de1_total = dw @ params["W2"]
    if de1 is not None:
        de1_total = de1_total + de1
    np.add.at(grads["E1"], trace.inputs, de1_total)
    return grads


def _backward_elman(params, config, trace, dz, grads):
    U, V = params["U"], params["V"]
    M = config.vocab_size
    T = len(trace)
    grads["V"] = dz.T @ trace.r
    dr_out = dz @ V
    Urec = U[:, M:]
    dpre = np.zeros_like(trace.r)
    carry = np.zeros(config.dim_recurrent)
    for t in range(T - 1, -1, -1):
        r = trace.r[t]
        d = (dr_out[t] + carry) * r * (1.0 - r)
        dpre[t] = d
        carry = d @ Urec
    r_prev = np.vstack([np.zeros((1, config.dim_recurrent)), trace.r[:-1]])
    grads["U"][:, M:] = dpre.T @ r_prev
    np.add.at(grads["U"].T, trace.inputs, dpre)
    return grads


def add_regularizer_grad(grads: Parameters, params: Parameters, lam: float, scale: float = 1.0):
    if lam:
        for k in grads:
            grads[k] += scale * 2.0 * lam * params[k]
    return grads


# --------------------------------------------------------------------------
# finite-difference checker


def gradcheck_config(variant, vocab_size: int = 12, dim_image: int = 5) -> MRnnConfig:
    """Tiny model (embeddings 4, recurrent 6, multimodal 8) for gradient checks.

    The Elman baseline gets 8 hidden units so it has more than 200 parameters.
    """
    variant = Variant(variant)
    hidden = 8 if variant is Variant.ELMAN else 6
    return MRnnConfig(
        vocab_size=vocab_size,
        dim_image=dim_image,
        dim_embed1=4,
        dim_embed2=hidden,
        dim_recurrent=hidden,
        dim_multimodal=8,
        variant=variant,
    )


def _relu_margin(params, config, image, caption) -> float:
    if config.variant is Variant.ELMAN:
        return math.inf
    trace = forward_sentence(params, config, image, caption)
    r_prev = np.vstack([np.zeros((1, config.dim_recurrent)), trace.r[:-1]])
    pre = r_prev @ params["Ur"].T + trace.w + params["br"]
    return float(np.min(np.abs(pre)))


def make_gradcheck_problem(config: MRnnConfig, seed: int, length: int = 5, margin: float = 1e-3):
    """Random parameters, image and sentence with every ReLU input at least `margin` from 0."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        params = init_parameters(config, int(rng.integers(2**31)), scale=0.5)
        for name in params:
            if name.startswith("b"):
                params[name] = rng.uniform(-0.2, 0.2, size=params[name].shape)
        image = rng.normal(size=config.dim_image)
        body = rng.integers(3, config.vocab_size, size=length - 1)
        caption = np.concatenate([[0], body, [1]])
        if _relu_margin(params, config, image, caption) > margin:
            return params, image, caption
    raise RuntimeError("could not find a problem away from ReLU kinks")


def _sample_coordinates(params: Parameters, n_coords: int, rng) -> list[tuple[str, int]]:
    """At least `n_coords` flat indices, every tensor represented, roughly size-proportional."""
    total = params.count()
    n_coords = min(n_coords, total)
    picks = {}
    for name, arr in params.items():
        share = max(3, int(math.ceil(n_coords * arr.size / total)))
        picks[name] = set(rng.choice(arr.size, size=min(arr.size, share), replace=False).tolist())
    names = list(params)
    while sum(len(v) for v in picks.values()) < n_coords:
        name = names[int(rng.integers(len(names)))]
        if len(picks[name]) < params[name].size:
            picks[name].add(int(rng.integers(params[name].size)))
    return [(name, i) for name in names for i in sorted(picks[name])]


def check_gradients(
    config: MRnnConfig,
    seed: int = 0,
    h: float = 1e-5,
    n_coords: int = 200,
    lam: float = 0.0,
    mask_data: bool = False,
    grad_fn: Callable | None = None,
    extended: bool = True,
) -> dict:
    """Compare analytic gradients with central differences on sampled coordinates.

    The analytic side runs in float64. With `extended` the finite-difference
    objective is evaluated in long double: at h=1e-5 float64 cancellation
    leaves ~1e-10 absolute noise, which swamps coordinates with |g| < 1e-4.
    `grad_fn` replaces `backward_sentence` (used for mutation tests).
    Returns the overall max relative error and per-tensor maxima.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params, image, caption = make_gradcheck_problem(config, seed)
    grad_fn = grad_fn or backward_sentence

    if mask_data:
        analytic = params.zeros_like()
    else:
        analytic = grad_fn(params, config, forward_sentence(params, config, image, caption))
    add_regularizer_grad(analytic, params, lam)

    dtype = np.longdouble if extended else np.float64
    probe = Parameters({k: v.astype(dtype) for k, v in params.items()})
    ln2 = dtype(LN2)

    def objective(p):
        value = dtype(0.0)
        if lam:
            value += dtype(lam) * sum((a * a).sum() for a in p.values())
        if not mask_data:
            value -= forward_sentence(p, config, image, caption).target_log_probs().sum() / ln2
        return value

    rng = np.random.default_rng(seed + 1)
    coords = _sample_coordinates(params, n_coords, rng)
    step = dtype(h)
    per_tensor: dict[str, float] = {}
    for name, flat in coords:
        arr = probe[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + step
        f_plus = objective(probe)
        arr[flat] = orig - step
        f_minus = objective(probe)
        arr[flat] = orig
        numeric = float((f_plus - f_minus) / (2 * step))
        exact = float(analytic[name].reshape(-1)[flat])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
        per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
    return {
        "variant": config.variant.value,
        "max_rel_error": max(per_tensor.values()),
        "per_tensor": per_tensor,
        "n_coords": len(coords),
    }


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class TrainHyperparams:
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 50
    lam: float = 0.0
    seed: int = 0
    lr_decay: float = 0.5
    lr_decay_every: int = 20

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based `epoch`."""
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class TrainState:
    params: Parameters
    velocity: Parameters
    epoch: int = 0


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    split: str
    report: CostReport


def sgd_step(state: TrainState, grads: Parameters, lr: float, hyper: TrainHyperparams) -> float:
    """Clip to `clip_norm` globally, then momentum update in place. Returns pre-clip norm."""
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if not math.isfinite(norm):
        raise DivergenceError("non-finite gradient norm")
    scale = hyper.clip_norm / norm if norm > hyper.clip_norm else 1.0
    for k, g in grads.items():
        vel = state.velocity[k]
        vel *= hyper.momentum
        vel -= (lr * scale) * g
        state.params[k] += vel
    return norm


def train_epoch(state: TrainState, config: MRnnConfig, train_set, hyper: TrainHyperparams) -> None:
    """One shuffled pass of per-sentence updates on the per-word-average sentence cost."""
    epoch = state.epoch + 1
    pairs = list(sentence_pairs(train_set))
    order = np.random.default_rng([hyper.seed, epoch]).permutation(len(pairs))
    lr = hyper.lr_at(epoch)
    for i in order:
        im, cap = pairs[i]
        trace = forward_sentence(state.params, config, im.feature, cap)
        grads = backward_sentence(state.params, config, trace)
        inv_len = 1.0 / len(trace)
        for g in grads.values():
            g *= inv_len
        add_regularizer_grad(grads, state.params, hyper.lam)
        sgd_step(state, grads, lr, hyper)
    state.epoch = epoch


def train(
    train_set,
    config: MRnnConfig,
    hyper: TrainHyperparams,
    val_set=None,
    state: TrainState | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[TrainState, list[EpochLog]], None] | None = None,
    init_seed: int | None = None,
) -> tuple[TrainState, list[EpochLog]]:
    """Run epochs `state.epoch + 1 .. hyper.epochs`. Deterministic given the seeds.

    Each epoch appends a train (and val) cost report; with `checkpoint_dir`
    a checkpoint ``epoch_XXXX.mrnc`` carrying the momentum buffers is written.
    """
    if not train_set:
        raise ValueError("empty training set")
    if state is None:
        params = init_parameters(config, hyper.seed if init_seed is None else init_seed)
        state = TrainState(params, params.zeros_like(), 0)
    history: list[EpochLog] = []
    while state.epoch < hyper.epochs:
        train_epoch(state, config, train_set, hyper)
        rep = corpus_cost(state.params, config, train_set, hyper.lam)
        if not math.isfinite(rep.avg_bits_per_word):
            raise DivergenceError(f"training diverged at epoch {state.epoch}")
        entries = [EpochLog(state.epoch, "train", rep)]
        if val_set:
            entries.append(EpochLog(state.epoch, "val", corpus_cost(state.params, config, val_set, hyper.lam)))
        history += entries
        log.info(
            "epoch %d lr %.4g train bits/word %.5f ppl %.5f",
            state.epoch, hyper.lr_at(state.epoch), rep.avg_bits_per_word, rep.perplexity,
        )
        if checkpoint_dir is not None:
            save_train_state(Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.mrnc", config, state, hyper)
        if on_epoch is not None:
            on_epoch(state, entries)
    return state, history


def save_train_state(path, config: MRnnConfig, state: TrainState, hyper: TrainHyperparams, meta=None):
    extra = {f"velocity.{k}": v for k, v in state.velocity.items()}
    m = {"epoch": state.epoch, "seed": hyper.seed}
    m.update(meta or {})
    save_checkpoint(path, config, state.params, meta=m, extra_tensors=extra)


def train_state_from_checkpoint(ckpt) -> TrainState:
    velocity = Parameters(
        {k: ckpt.extra_tensors.get(f"velocity.{k}", np.zeros_like(v)) for k, v in ckpt.params.items()}
    )
    return TrainState(ckpt.params, velocity, int(ckpt.meta.get("epoch", 0)))


COST_LOG_COLUMNS = ("epoch", "split", "avg_bits_per_word", "regularizer", "total_cost", "perplexity")


def cost_log_rows(history: Sequence[EpochLog]) -> list[dict]:
    return [
        {
            "epoch": e.epoch,
            "split": e.split,
            "avg_bits_per_word": repr(e.report.avg_bits_per_word),
            "regularizer": repr(e.report.regularizer),
            "total_cost": repr(e.report.total),
            "perplexity": repr(e.report.perplexity),
        }
        for e in history
    ]


def write_cost_log(path, history: Sequence[EpochLog], append: bool = False, header_comment: str | None = None):
    path = Path(path)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        if new_file and header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=COST_LOG_COLUMNS)
        if new_file:
            writer.writeheader()
        writer.writerows(cost_log_rows(history))


def read_cost_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
