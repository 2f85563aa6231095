"""Caption generation: greedy, sampled and n-best beam decoding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import MRnnConfig, Parameters, image_terms, initial_state, log_softmax, step

START_INDEX = 0
END_INDEX = 1


@dataclass(frozen=True)
class DecodeLimits:
    max_len: int = 50

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass(frozen=True)
class Hypothesis:
    indices: tuple[int, ...]
    log_prob: float
    complete: bool

    def words(self) -> tuple[int, ...]:
        """Indices without the start sign and the trailing end sign."""
        body = self.indices[1:]
        return body[:-1] if self.complete else body


class _Decoder:
    """Incremental next-word distributions for one image."""

    def __init__(self, params, config, image, start_index, end_index):
        self.params, self.config = params, config
        self.img = image_terms(params, config, image)
        self.start, self.end = start_index, end_index

    def advance(self, token: int, r_prev):
        out = step(self.params, self.config, token, r_prev, self.img)
        return log_softmax(out.logits), out.r


def _consume_prefix(dec: _Decoder, config, start_index: int, prefix):
    """Run the recurrence over [start, *prefix]; return the sequence, state and next log-probs."""
    seq = [start_index, *(int(t) for t in prefix)]
    if dec.end in seq[1:]:
        raise ValueError("prefix must not contain the end sign")
    r = initial_state(config)
    log_y = None
    for tok in seq:
        log_y, r = dec.advance(tok, r)
    return seq, r, log_y


def generate_greedy(
    params: Parameters,
    config: MRnnConfig,
    image,
    limits: DecodeLimits = DecodeLimits(),
    start_index: int = START_INDEX,
    end_index: int = END_INDEX,
    prefix: Sequence[int] = (),
) -> Hypothesis:
    """Feed back the argmax word (lowest index on ties) until the end sign or max_len.

    `prefix` seeds the sentence with given words after the start sign; only
    the generated words contribute to log_prob.
    """
    dec = _Decoder(params, config, image, start_index, end_index)
    seq, r, log_y = _consume_prefix(dec, config, start_index, prefix)
    logp = 0.0
    while len(seq) < limits.max_len:
        if log_y is None:
            log_y, r = dec.advance(seq[-1], r)
        word = int(np.argmax(log_y))
        logp += float(log_y[word])
        seq.append(word)
        log_y = None
        if word == end_index:
            return Hypothesis(tuple(seq), logp, True)
    return Hypothesis(tuple(seq), logp, False)


def generate_sample(
    params: Parameters,
    config: MRnnConfig,
    image,
    limits: DecodeLimits = DecodeLimits(),
    seed: int = 0,
    start_index: int = START_INDEX,
    end_index: int = END_INDEX,
    prefix: Sequence[int] = (),
) -> Hypothesis:
    """Draw each next word from the model distribution with a seeded generator."""
    rng = np.random.default_rng(seed)
    dec = _Decoder(params, config, image, start_index, end_index)
    seq, r, log_y = _consume_prefix(dec, config, start_index, prefix)
    logp = 0.0
    while len(seq) < limits.max_len:
        if log_y is None:
            log_y, r = dec.advance(seq[-1], r)
        probs = np.exp(log_y)
        # inverse-CDF draw; a one-hot distribution always returns its mode
        cdf = np.cumsum(probs)
        word = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        word = min(word, len(probs) - 1)
        while probs[word] == 0.0:
            word -= 1
        logp += float(log_y[word])
        seq.append(word)
        log_y = None
        if word == end_index:
            return Hypothesis(tuple(seq), logp, True)
    return Hypothesis(tuple(seq), logp, False)


def _rank_key(h):
    return (-h[1], h[0])


def beam_search(
    params: Parameters,
    config: MRnnConfig,
    image,
    n: int,
    limits: DecodeLimits = DecodeLimits(),
    start_index: int = START_INDEX,
    end_index: int = END_INDEX,
) -> list[Hypothesis]:
    """Breadth-first n-best search without length normalization.

    Every step expands all live beams over the whole vocabulary and ranks the
    extensions by cumulative log-probability (ties by index sequence). The n
    best non-final extensions stay live; any extension ending in the end sign
    that outranks the weakest kept live beam is banked as complete, so banked
    sequences never reduce the live width. Stops once n sequences are banked
    or the live beams reach max_len, in which case they fill the result as
    incomplete hypotheses.
    """
    if n < 1:
        raise ValueError("beam width must be >= 1")
    dec = _Decoder(params, config, image, start_index, end_index)
    live = [((start_index,), 0.0, initial_state(config))]
    banked: list[Hypothesis] = []
    length = 1
    while live and len(banked) < n and length < limits.max_len:
        candidates = []
        for seq, logp, r in live:
            log_y, r_new = dec.advance(seq[-1], r)
            # only the n+1 best words of a beam (plus its end sign) can survive
            order = np.argsort(-log_y, kind="stable")[: n + 1]
            words = set(order.tolist())
            words.add(end_index)
            for word in words:
                candidates.append((seq + (word,), logp + float(log_y[word]), r_new))
        candidates.sort(key=_rank_key)
        length += 1
        live = []
        for seq, logp, r in candidates:
            if len(live) == n:
                break
            if seq[-1] == end_index:
                banked.append(Hypothesis(seq, logp, True))
            else:
                live.append((seq, logp, r))
    if len(banked) < n:
        banked.extend(Hypothesis(seq, logp, False) for seq, logp, _ in live)
    banked.sort(key=lambda h: (-h.log_prob, h.indices))
    return banked[:n]


# --------------------------------------------------------------------------
# hypothesis files


def write_hypotheses(path, rows: Iterable[tuple[str, list[Hypothesis]]], vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, hyps in rows:
            rec = {
                "image_id": image_id,
                "hypotheses": [
                    {
                        "tokens": vocab.decode(h.words(), strip=False),
                        "log_prob": h.log_prob,
                        "complete": h.complete,
                    }
                    for h in hyps
                ],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_hypotheses(path) -> dict[str, list[dict]]:
    from .corpus import FormatError

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"hypothesis file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["image_id"]] = [
                    {"tokens": list(h["tokens"]), "log_prob": float(h["log_prob"])}
                    for h in rec["hypotheses"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad hypothesis record ({exc})") from exc
    return out
