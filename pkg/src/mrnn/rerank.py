"""Consensus reranking of beam hypotheses against nearest-neighbour captions."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import FeatureStore
from .metrics import IdfTable, sentence_bleu, sentence_cider


class Similarity(str, enum.Enum):
    BLEU = "bleu"
    CIDER = "cider"


class FeatureKind(str, enum.Enum):
    ORIGINAL = "original"
    REFINED = "refined"


@dataclass(frozen=True)
class RerankConfig:
    n_hypotheses: int = 10
    k_neighbors: int = 60
    m_nearest_captions: int = 175
    similarity: Similarity = Similarity.BLEU
    feature_kind: FeatureKind = FeatureKind.ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        object.__setattr__(self, "feature_kind", FeatureKind(self.feature_kind))
        if self.n_hypotheses < 1 or self.k_neighbors < 1 or self.m_nearest_captions < 1:
            raise ValueError("n, k and m must all be >= 1")


# cross-validated settings reported for MS COCO
COCO_PRESETS = {
    Similarity.BLEU: RerankConfig(10, 60, 175, Similarity.BLEU),
    Similarity.CIDER: RerankConfig(10, 60, 125, Similarity.CIDER),
}


def nearest_neighbors(query, store: FeatureStore, k: int, exclude_id: str | None = None) -> list[str]:
    """Top-k ids by cosine similarity (ties by id), skipping `exclude_id`."""
    ids = [i for i in store.ids() if i != exclude_id]
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} candidate images")
    if k < 1:
        raise ValueError("k must be >= 1")
    mat = store.matrix(ids)
    q = np.asarray(query, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(norms > 0, mat @ q / norms, 0.0)
    order = sorted(range(len(ids)), key=lambda j: (-sims[j], ids[j]))
    return [ids[j] for j in order[:k]]


def similarity_fn(kind: Similarity, idf: IdfTable | None = None) -> Callable:
    kind = Similarity(kind)
    if kind is Similarity.BLEU:
        return sentence_bleu
    if idf is None:
        raise ValueError("CIDEr similarity needs an IDF table")
    return lambda hyp, ref: sentence_cider(hyp, [ref], idf)


def consensus_score(hypothesis, neighbor_captions: Sequence, m: int, similarity: Callable) -> float:
    """Mean of the m largest similarities between the hypothesis and the neighbour captions."""
    if not neighbor_captions:
        raise ValueError("no neighbour captions")
    if not 1 <= m <= len(neighbor_captions):
        raise ValueError(f"m={m} out of range 1..{len(neighbor_captions)}")
    sims = sorted((similarity(hypothesis, c) for c in neighbor_captions), reverse=True)
    return float(np.mean(sims[:m]))


@dataclass(frozen=True)
class Reranked:
    tokens: tuple[str, ...]
    score: float
    original_rank: int
    new_rank: int


def _stable_rerank(hypotheses: Sequence, scores: Sequence[float]) -> list[Reranked]:
    if len(hypotheses) == 0:
        raise ValueError("no hypotheses to rerank")
    order = sorted(range(len(hypotheses)), key=lambda i: -scores[i])
    return [
        Reranked(tuple(hypotheses[i]), float(scores[i]), i + 1, new)
        for new, i in enumerate(order, 1)
    ]


def consensus_rerank(hypotheses: Sequence, neighbor_captions: Sequence, config: RerankConfig, similarity: Callable):
    """Reorder token sequences by consensus score; beam order breaks ties."""
    m = min(config.m_nearest_captions, len(neighbor_captions))
    scores = [consensus_score(h, neighbor_captions, m, similarity) for h in hypotheses]
    return _stable_rerank(hypotheses, scores)


def oracle_rerank(hypotheses: Sequence, groundtruth_captions: Sequence, similarity: Callable):
    """Upper bound: reorder by the best similarity to any groundtruth caption."""
    if not groundtruth_captions:
        raise ValueError("no groundtruth captions")
    scores = [max(similarity(h, g) for g in groundtruth_captions) for h in hypotheses]
    return _stable_rerank(hypotheses, scores)


def write_rerank_report(path, rows: Sequence[tuple[str, Reranked]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "original_rank", "new_rank", "consensus_score", "hypothesis_text"])
        for image_id, r in rows:
            w.writerow([image_id, r.original_rank, r.new_rank, repr(r.score), " ".join(r.tokens)])
