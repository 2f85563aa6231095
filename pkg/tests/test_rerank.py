import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrnn.corpus import FeatureStore
from mrnn.metrics import IdfTable, sentence_bleu
from mrnn.model import refine_feature
from mrnn.rerank import (
    COCO_PRESETS,
    RerankConfig,
    consensus_rerank,
    consensus_score,
    nearest_neighbors,
    oracle_rerank,
    similarity_fn,
    write_rerank_report,
)

from conftest import random_model


def _store(vectors):
    s = FeatureStore(len(vectors[0]))
    for k, v in enumerate(vectors):
        s.add(f"v{k:02d}", np.asarray(v, dtype=float))
    return s


def test_presets():
    assert (COCO_PRESETS["bleu"].k_neighbors, COCO_PRESETS["bleu"].m_nearest_captions) == (60, 175)
    assert (COCO_PRESETS["cider"].k_neighbors, COCO_PRESETS["cider"].m_nearest_captions) == (60, 125)
    with pytest.raises(ValueError):
        RerankConfig(n_hypotheses=0)


def test_refine_feature_range_and_zero():
    config, p, img = random_model(seed=1)
    assert not refine_feature(p, np.zeros(config.dim_image)).any()
    out = refine_feature(p, 1e3 * img)
    assert np.all(np.abs(out) <= 1.7159)
    with pytest.raises(ValueError):
        refine_feature(p, np.ones(config.dim_image + 1))


def test_knn_examples():
    q = np.array([1.0, 2.0, 0.0])
    s = _store([[0, 0, 1], [2, 4, 0], [1, 1, 0], [0, 0, -3]])
    assert nearest_neighbors(q, s, 4) == ["v01", "v02", "v00", "v03"]
    assert nearest_neighbors(q, s, 1, exclude_id="v01") == ["v02"]
    with pytest.raises(ValueError):
        nearest_neighbors(q, s, 5)


def test_knn_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(10, 6))
    q = rng.normal(size=6)
    s = _store(list(vecs))
    cos = [float(v @ q / (np.linalg.norm(v) * np.linalg.norm(q))) for v in vecs]
    want = [f"v{k:02d}" for k in sorted(range(10), key=lambda k: -cos[k])]
    assert nearest_neighbors(q, s, 10) == want


@settings(max_examples=20)
@given(st.integers(0, 1000), st.floats(0.01, 100))
def test_knn_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(8, 4))
    q = rng.normal(size=4)
    assert nearest_neighbors(q, _store(list(vecs)), 5) == nearest_neighbors(q, _store(list(scale * vecs)), 5)


def test_consensus_score_hand_example():
    sims = {"a": 0.9, "b": 0.1, "c": 0.5, "d": 0.7, "e": 0.3}
    caps = list(sims)
    score = consensus_score("h", caps, 3, lambda h, c: sims[c])
    assert abs(score - (0.9 + 0.7 + 0.5) / 3) < 1e-15
    assert consensus_score("h", caps, 1, lambda h, c: sims[c]) == 0.9
    with pytest.raises(ValueError):
        consensus_score("h", caps, 6, lambda h, c: sims[c])


def test_consensus_identical_captions_bleu_is_one():
    h = "two red circles".split()
    for m in (1, 2, 3):
        assert consensus_score(h, [h, h, h], m, sentence_bleu) == 1.0


def test_consensus_rerank_moves_best_to_top():
    hyps = [s.split() for s in ["a dog", "a cat sitting", "one red circle here", "a blue thing"]]
    neighbors = [s.split() for s in ["one red circle here", "one red circle", "a red circle here"]]
    out = consensus_rerank(hyps, neighbors, RerankConfig(4, 1, 2), sentence_bleu)
    assert out[0].tokens == tuple(hyps[2]) and out[0].original_rank == 3 and out[0].new_rank == 1
    assert sorted(r.tokens for r in out) == sorted(tuple(h) for h in hyps)


def test_rerank_stability_and_single():
    hyps = [["x"], ["y"], ["z"]]
    out = consensus_rerank(hyps, [["q"]], RerankConfig(3, 1, 1), lambda h, c: 0.0)
    assert [r.original_rank for r in out] == [1, 2, 3]
    one = consensus_rerank([["x"]], [["x"]], RerankConfig(1, 1, 1), sentence_bleu)
    assert one[0].new_rank == 1
    with pytest.raises(ValueError):
        consensus_rerank([], [["x"]], RerankConfig(), sentence_bleu)


def test_oracle_rerank():
    gts = [s.split() for s in ["one red circle", "a picture of one red circle"]]
    hyps = [s.split() for s in ["two blue squares", "one red circle", "a red thing"]]
    out = oracle_rerank(hyps, gts, sentence_bleu)
    assert out[0].tokens == ("one", "red", "circle") and out[0].score == 1.0
    vals = {tuple(h): max(sentence_bleu(h, g) for g in gts) for h in hyps}
    assert [r.tokens for r in out] == sorted(vals, key=lambda t: -vals[t])
    with pytest.raises(ValueError):
        oracle_rerank(hyps, [], sentence_bleu)


def test_oracle_bound_and_consensus_equals_oracle_on_groundtruth():
    idf = IdfTable.build([[s.split() for s in ["one red circle", "two blue squares"]], [["a", "b"]]])
    rng = np.random.default_rng(3)
    words = "one two red blue circle squares a picture of".split()
    for kind in ("bleu", "cider"):
        sim = similarity_fn(kind, idf)
        for _ in range(20):
            hyps = [list(rng.choice(words, size=rng.integers(1, 6))) for _ in range(10)]
            gts = [list(rng.choice(words, size=rng.integers(2, 6))) for _ in range(3)]
            neigh = [list(rng.choice(words, size=rng.integers(2, 6))) for _ in range(9)]
            oracle = oracle_rerank(hyps, gts, sim)
            cons = consensus_rerank(hyps, neigh, RerankConfig(10, 3, 4, kind), sim)
            gt_score = lambda t: max(sim(list(t), g) for g in gts)
            assert oracle[0].score >= gt_score(cons[0].tokens) >= min(gt_score(h) for h in hyps)
            # with neighbour captions = groundtruth and m=1, consensus is the oracle
            same = consensus_rerank(hyps, gts, RerankConfig(10, 1, 1, kind), sim)
            assert [r.tokens for r in same] == [r.tokens for r in oracle]


def test_similarity_fn_cider_needs_idf():
    with pytest.raises(ValueError):
        similarity_fn("cider")


def test_rerank_report(tmp_path):
    out = consensus_rerank([["a"], ["b"]], [["b"]], RerankConfig(2, 1, 1), sentence_bleu)
    write_rerank_report(tmp_path / "r.csv", [("img", r) for r in out])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "image_id,original_rank,new_rank,consensus_score,hypothesis_text"
    assert lines[1].startswith("img,2,1,")
