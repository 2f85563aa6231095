"""BLEU (corpus and sentence level), sentence CIDEr and corpus perplexity."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .model import MRnnConfig, Parameters

SENTENCE_BLEU_EPSILON = 1e-9


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def brevity_penalty(r: float, c: float) -> float:
    if c <= 0:
        return 0.0
    return min(1.0, math.exp(1.0 - r / c))


def closest_ref_length(c: int, ref_lengths: Sequence[int]) -> int:
    """Reference length closest to c; equidistant ties go to the shorter."""
    return min(ref_lengths, key=lambda r: (abs(r - c), r))


def clipped_counts(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int):
    """(clipped matches, total candidate n-grams) for one sentence."""
    cand = ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, k in ngrams(ref, n).items():
            if k > max_ref[g]:
                max_ref[g] = k
    matched = sum(min(k, max_ref[g]) for g, k in cand.items())
    return matched, sum(cand.values())


@dataclass(frozen=True)
class BleuReport:
    p: tuple[float, ...]  # p[n-1] is the modified n-gram precision
    r: int
    c: int
    bp: float
    b: tuple[float, ...]  # b[n-1] is B-n
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()


def corpus_bleu(
    candidates: Sequence[Sequence[str]],
    reference_sets: Sequence[Sequence[Sequence[str]]],
    max_n: int = 4,
) -> BleuReport:
    """Corpus BLEU with counts, r and c pooled over all sentences before dividing."""
    if len(candidates) == 0:
        raise ValueError("empty candidate corpus")
    if len(candidates) != len(reference_sets):
        raise ValueError("candidates and reference sets are not aligned")
    matches = [0] * max_n
    totals = [0] * max_n
    r = c = 0
    for cand, refs in zip(candidates, reference_sets):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        c += len(cand)
        r += closest_ref_length(len(cand), [len(x) for x in refs])
        for n in range(1, max_n + 1):
            m, t = clipped_counts(cand, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
    p = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = brevity_penalty(r, c)
    b = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if p[n - 1] == 0.0 or not math.isfinite(log_sum):
            log_sum = -math.inf
            b.append(0.0)
            continue
        log_sum += math.log(p[n - 1])
        b.append(bp * math.exp(log_sum / n))
    return BleuReport(p, r, c, bp, tuple(b), tuple(matches), tuple(totals))


def sentence_bleu(hypothesis: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Single-pair BLEU-4; a zero clipped count is replaced by a tiny epsilon.

    Orders longer than the hypothesis have no n-grams and are left out of the
    geometric mean, so sentence_bleu(x, x) == 1 for any non-empty x.
    """
    if not hypothesis or not reference:
        raise ValueError("sentence_bleu needs non-empty sequences")
    orders = min(max_n, len(hypothesis))
    log_sum = 0.0
    for n in range(1, orders + 1):
        m, t = clipped_counts(hypothesis, [reference], n)
        log_sum += math.log((m if m > 0 else SENTENCE_BLEU_EPSILON) / t)
    return brevity_penalty(len(reference), len(hypothesis)) * math.exp(log_sum / orders)


# --------------------------------------------------------------------------
# CIDEr


@dataclass
class IdfTable:
    """Document frequencies of n-grams over training images (one doc per image)."""

    doc_freq: dict[tuple[str, ...], int]
    n_docs: int
    max_n: int = 4

    @classmethod
    def build(cls, reference_groups: Sequence[Sequence[Sequence[str]]], max_n: int = 4) -> "IdfTable":
        if not reference_groups:
            raise ValueError("no documents for IDF")
        df: Counter = Counter()
        for refs in reference_groups:
            seen = set()
            for ref in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngrams(ref, n))
            df.update(seen)
        return cls(dict(df), len(reference_groups), max_n)

    def idf(self, gram: tuple[str, ...]) -> float:
        return math.log(self.n_docs / max(1.0, self.doc_freq.get(gram, 0.0)))


def _tfidf(tokens: Sequence[str], n: int, idf: IdfTable) -> dict:
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (k / total) * idf.idf(g) for g, k in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def sentence_cider(hypothesis: Sequence[str], references: Sequence[Sequence[str]], idf: IdfTable) -> float:
    """Plain CIDEr: mean over n of TF-IDF cosine, averaged over references, times 10.

    As in sentence_bleu, orders the hypothesis is too short for are skipped.
    """
    if not hypothesis or not references or any(len(r) == 0 for r in references):
        raise ValueError("sentence_cider needs non-empty inputs")
    orders = min(idf.max_n, len(hypothesis))
    total = 0.0
    for n in range(1, orders + 1):
        h = _tfidf(hypothesis, n, idf)
        total += sum(_cosine(h, _tfidf(ref, n, idf)) for ref in references) / len(references)
    return 10.0 * total / orders


# --------------------------------------------------------------------------
# perplexity


def corpus_perplexity(params: Parameters, config: MRnnConfig, dataset) -> float:
    """Word-weighted geometric perplexity over every caption in `dataset`."""
    from .training import corpus_cost

    return corpus_cost(params, config, dataset, 0.0).perplexity


def perplexity_from_bits(bits_per_sentence: Sequence[float], lengths: Sequence[int]) -> float:
    """2 ** (sum of L_i * log2 PPL_i / sum of L_i), given each sentence's summed bits."""
    n = sum(lengths)
    if n == 0:
        raise ValueError("no words")
    return 2.0 ** (sum(bits_per_sentence) / n)


def write_eval_report(path, bleu: BleuReport | None = None, perplexity: float | None = None):
    """CSV rows (metric, n, value, p_n, r, c, bp); BLEU rows carry the sub-report."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "n", "value", "p_n", "r", "c", "bp"])
        if bleu is not None:
            for n, (b, p) in enumerate(zip(bleu.b, bleu.p), 1):
                w.writerow(["bleu", n, repr(b), repr(p), bleu.r, bleu.c, repr(bleu.bp)])
        if perplexity is not None:
            w.writerow(["perplexity", "", repr(perplexity), "", "", "", ""])
