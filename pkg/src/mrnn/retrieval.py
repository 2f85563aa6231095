"""Image and sentence retrieval by generation probability, with R@K / Med r."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .model import MRnnConfig, Parameters, forward_sentence


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranking: tuple[tuple[str, float], ...]
    rank_of_groundtruth: int


@dataclass(frozen=True)
class RetrievalMetrics:
    r_at: dict[int, float]
    med_r: float
    n_queries: int


def sentence_logprob(params: Parameters, config: MRnnConfig, sentence, image) -> float:
    """ln P(sentence | image), summed over every predicted word including the end sign."""
    return float(forward_sentence(params, config, image, sentence).target_log_probs().sum())


def logprob_matrix(params, config, sentences: Sequence, images: Sequence) -> np.ndarray:
    """Entry [i, j] = ln P(sentences[i] | images[j])."""
    out = np.empty((len(sentences), len(images)))
    for j, image in enumerate(images):
        for i, s in enumerate(sentences):
            out[i, j] = sentence_logprob(params, config, s, image)
    return out


def rank_candidates(
    query_id: str,
    candidate_ids: Sequence[str],
    scores: Sequence[float],
    groundtruth: set[str] | Callable[[str], bool],
) -> RetrievalResult:
    """Sort by score descending, ties by candidate id; record the best groundtruth rank."""
    if len(candidate_ids) == 0:
        raise ValueError("empty candidate set")
    is_gt = groundtruth if callable(groundtruth) else groundtruth.__contains__
    order = sorted(range(len(candidate_ids)), key=lambda k: (-scores[k], candidate_ids[k]))
    ranking = tuple((candidate_ids[k], float(scores[k])) for k in order)
    rank = next((pos for pos, (cid, _) in enumerate(ranking, 1) if is_gt(cid)), None)
    if rank is None:
        raise ValueError(f"no groundtruth among candidates for query {query_id}")
    return RetrievalResult(query_id, ranking, rank)


def retrieve_images(
    params: Parameters,
    config: MRnnConfig,
    query_sentence,
    image_ids: Sequence[str],
    images: Sequence,
    groundtruth: set[str],
    query_id: str = "query",
) -> RetrievalResult:
    scores = [sentence_logprob(params, config, query_sentence, im) for im in images]
    return rank_candidates(query_id, image_ids, scores, groundtruth)


def marginal_logprob(logprobs_over_marginal: np.ndarray) -> np.ndarray:
    """ln of the mean probability over the marginal images, along the last axis."""
    lp = np.asarray(logprobs_over_marginal, dtype=np.float64)
    if lp.shape[-1] == 0:
        raise ValueError("empty marginal image set")
    return logsumexp(lp, axis=-1) - np.log(lp.shape[-1])


def normalized_sentence_score(
    params: Parameters, config: MRnnConfig, sentence, query_image, marginal_images: Sequence
) -> float:
    """ln P(w | query) - ln P(w), with P(w) the mean of P(w | I') over the marginal set."""
    if len(marginal_images) == 0:
        raise ValueError("empty marginal image set")
    lp_query = sentence_logprob(params, config, sentence, query_image)
    lp_marg = np.array([sentence_logprob(params, config, sentence, im) for im in marginal_images])
    return float(lp_query - marginal_logprob(lp_marg))


def retrieve_sentences(
    params: Parameters,
    config: MRnnConfig,
    query_image,
    sentence_ids: Sequence[str],
    sentences: Sequence,
    marginal_images: Sequence,
    groundtruth: set[str],
    query_id: str = "query",
    normalize: bool = True,
) -> RetrievalResult:
    lp = np.array([sentence_logprob(params, config, s, query_image) for s in sentences])
    if normalize:
        marg = logprob_matrix(params, config, sentences, marginal_images)
        lp = lp - marginal_logprob(marg)
    return rank_candidates(query_id, sentence_ids, lp.tolist(), groundtruth)


def compute_metrics(results: Sequence[RetrievalResult], ks=(1, 5, 10)) -> RetrievalMetrics:
    if not results:
        raise ValueError("no retrieval results")
    ranks = np.array([r.rank_of_groundtruth for r in results])
    r_at = {k: 100.0 * float(np.mean(ranks <= k)) for k in ks}
    return RetrievalMetrics(r_at, float(np.median(ranks)), len(results))


# --------------------------------------------------------------------------
# whole-split evaluation


@dataclass
class RetrievalRun:
    results: list[RetrievalResult]
    metrics: RetrievalMetrics
    score_rows: list[tuple[str, str, float]]


def evaluate_image_retrieval(params, config, test_images) -> RetrievalRun:
    """Every test caption queries the test images; its own image is the groundtruth."""
    ids = [im.id for im in test_images]
    feats = [im.feature for im in test_images]
    sentences = [(f"{im.id}#{j}", cap, im.id) for im in test_images for j, cap in enumerate(im.captions)]
    lp = logprob_matrix(params, config, [s[1] for s in sentences], feats)
    results, rows = [], []
    for i, (sid, _, owner) in enumerate(sentences):
        results.append(rank_candidates(sid, ids, lp[i].tolist(), {owner}))
        rows += [(sid, cid, float(lp[i, j])) for j, cid in enumerate(ids)]
    return RetrievalRun(results, compute_metrics(results), rows)


def evaluate_sentence_retrieval(
    params, config, test_images, marginal_images, normalize: bool = True
) -> RetrievalRun:
    """Every test image queries all test captions; its own captions are groundtruth."""
    sentences = [(f"{im.id}#{j}", cap) for im in test_images for j, cap in enumerate(im.captions)]
    caps = [s[1] for s in sentences]
    sids = [s[0] for s in sentences]
    lp = logprob_matrix(params, config, caps, [im.feature for im in test_images])
    if normalize:
        marg = logprob_matrix(params, config, caps, [im.feature for im in marginal_images])
        lp = lp - marginal_logprob(marg)[:, None]
    results, rows = [], []
    for j, im in enumerate(test_images):
        own = {f"{im.id}#{k}" for k in range(len(im.captions))}
        results.append(rank_candidates(im.id, sids, lp[:, j].tolist(), own))
        rows += [(im.id, sid, float(lp[i, j])) for i, sid in enumerate(sids)]
    return RetrievalRun(results, compute_metrics(results), rows)


def write_score_matrix(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "candidate_id", "score"])
        for q, c, s in rows:
            w.writerow([q, c, repr(s)])


def write_retrieval_metrics(path, metrics_by_direction: dict[str, RetrievalMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "metric", "value"])
        for direction, m in metrics_by_direction.items():
            for k, v in m.r_at.items():
                w.writerow([direction, f"R@{k}", repr(v)])
            w.writerow([direction, "med_r", repr(m.med_r)])
