"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import corpus
from .decode import beam_search, generate_greedy
from .metrics import IdfTable, corpus_bleu, corpus_perplexity
from .model import MRnnConfig, Parameters, Variant, refine_feature
from .rerank import consensus_rerank, nearest_neighbors, oracle_rerank, similarity_fn, RerankConfig
from .retrieval import evaluate_image_retrieval, evaluate_sentence_retrieval
from .training import TrainHyperparams, train

# reduced layer sizes for synthetic runs (embedding I, recurrent, multimodal)
DESK_DIMS = {"dim_embed1": 16, "dim_embed2": 32, "dim_recurrent": 32, "dim_multimodal": 64}
DESK_LR = 0.01


@dataclass
class TrainedModel:
    config: MRnnConfig
    params: Parameters
    history: list
    seconds: float


def train_model(
    train_images, vocab, dim_image: int, variant=Variant.FULL, seed: int = 0, epochs: int = 20,
    learning_rate: float = DESK_LR, dims: dict | None = None,
) -> TrainedModel:
    config = MRnnConfig(vocab_size=len(vocab), dim_image=dim_image, variant=Variant(variant), **(dims or DESK_DIMS))
    hyper = TrainHyperparams(learning_rate=learning_rate, epochs=epochs, seed=seed)
    t0 = time.perf_counter()
    state, history = train(train_images, config, hyper)
    return TrainedModel(config, state.params, history, time.perf_counter() - t0)


def greedy_captions(model: TrainedModel, vocab, images) -> list[list[str]]:
    return [vocab.decode(generate_greedy(model.params, model.config, im.feature).indices) for im in images]


def greedy_bleu(model: TrainedModel, vocab, images):
    return corpus_bleu(greedy_captions(model, vocab, images), [im.raw_captions for im in images])


# --------------------------------------------------------------------------


@dataclass
class OverfitResult:
    final_perplexity: float
    exact_captions: int
    n_images: int
    image_r1: float
    sentence_r1: float
    epochs: int
    seconds: float


def run_overfit(seed: int = 0, n_images: int = 8, epochs: int = 300, learning_rate: float = 0.05) -> OverfitResult:
    """Memorize n_images single-caption synthetic images with the Full model."""
    vocab, images, store = corpus.synthetic_images(n_images, seed, captions_per_image=1)
    t0 = time.perf_counter()
    model = train_model(images, vocab, store.dim, Variant.FULL, seed, epochs, learning_rate)
    exact = sum(
        generate_greedy(model.params, model.config, im.feature).indices == im.captions[0] for im in images
    )
    img = evaluate_image_retrieval(model.params, model.config, images).metrics
    sen = evaluate_sentence_retrieval(model.params, model.config, images, images).metrics
    return OverfitResult(
        final_perplexity=model.history[-1].report.perplexity,
        exact_captions=int(exact),
        n_images=n_images,
        image_r1=img.r_at[1],
        sentence_r1=sen.r_at[1],
        epochs=epochs,
        seconds=time.perf_counter() - t0,
    )


@dataclass
class VariantScores:
    variant: str
    seed: int
    test_perplexity: float
    bleu: tuple
    train_perplexity: float
    seconds: float


@dataclass
class SyntheticSplit:
    vocab: corpus.Vocabulary
    train: list
    test: list
    dim: int
    models: dict = field(default_factory=dict)


def synthetic_split(seed: int, n_train: int = 200, n_test: int = 50, captions_per_image: int = 3) -> SyntheticSplit:
    vocab, images, store = corpus.synthetic_images(n_train + n_test, seed, captions_per_image, n_test=n_test)
    return SyntheticSplit(vocab, corpus.split(images, "train"), corpus.split(images, "test"), store.dim)


def compare_variants(data: SyntheticSplit, seed: int, variants, epochs: int = 20) -> dict[str, VariantScores]:
    """Train each variant with identical hyperparameters and seed; score on the test split."""
    out = {}
    for v in variants:
        v = Variant(v)
        model = train_model(data.train, data.vocab, data.dim, v, seed, epochs)
        data.models[v.value] = model
        out[v.value] = VariantScores(
            variant=v.value,
            seed=seed,
            test_perplexity=corpus_perplexity(model.params, model.config, data.test),
            bleu=greedy_bleu(model, data.vocab, data.test).b,
            train_perplexity=model.history[-1].report.perplexity,
            seconds=model.seconds,
        )
    return out


def normalization_ablation(model: TrainedModel, data: SyntheticSplit) -> tuple[float, float]:
    """Sentence retrieval R@1 on the test split with and without the marginal normalization."""
    norm = evaluate_sentence_retrieval(model.params, model.config, data.test, data.train, True).metrics
    raw = evaluate_sentence_retrieval(model.params, model.config, data.test, data.train, False).metrics
    return norm.r_at[1], raw.r_at[1]


@dataclass
class RerankBound:
    image_id: str
    oracle_top1: float
    consensus_top1: float
    beam_top1: float


def rerank_bounds(
    model: TrainedModel, data: SyntheticSplit, similarity: str, n: int = 10, k: int = 10, m: int = 15,
    refined: bool = False,
) -> list[RerankBound]:
    """Per test image: groundtruth similarity of the oracle, consensus and beam top-1 picks."""
    idf = IdfTable.build([im.raw_captions for im in data.train])
    sim = similarity_fn(similarity, idf)
    cfg = RerankConfig(n, k, m, similarity)

    def feat(v):
        return refine_feature(model.params, v) if refined else v

    store = corpus.FeatureStore(len(feat(data.train[0].feature)), {im.id: feat(im.feature) for im in data.train})
    by_id = {im.id: im for im in data.train}
    out = []
    for im in data.test:
        hyps = beam_search(model.params, model.config, im.feature, n)
        cands = [data.vocab.decode(h.indices) or ["<empty>"] for h in hyps]
        neighbors = nearest_neighbors(feat(im.feature), store, k)
        refs = [c for i in neighbors for c in by_id[i].raw_captions]
        consensus = consensus_rerank(cands, refs, cfg, sim)
        oracle = oracle_rerank(cands, im.raw_captions, sim)

        def gt_score(tokens):
            return max(sim(tokens, g) for g in im.raw_captions)

        out.append(RerankBound(im.id, oracle[0].score, gt_score(consensus[0].tokens), gt_score(cands[0])))
    return out


def random_feature(dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=dim)
