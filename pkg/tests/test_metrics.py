import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

import bleu_oracle
from mrnn import corpus
from mrnn.metrics import (
    IdfTable,
    brevity_penalty,
    closest_ref_length,
    corpus_bleu,
    corpus_perplexity,
    perplexity_from_bits,
    sentence_bleu,
    sentence_cider,
    write_eval_report,
)
from mrnn.model import init_parameters

from conftest import small_config


def test_bleu_hand_oracle():
    cands, refs = bleu_oracle.corpus()
    rep = corpus_bleu(cands, refs)
    assert rep.c == bleu_oracle.C and rep.r == bleu_oracle.R
    for got, want in zip(rep.p, bleu_oracle.P):
        assert abs(got - want) < 1e-12
    assert abs(rep.bp - bleu_oracle.BP) < 1e-12
    for got, want in zip(rep.b, bleu_oracle.B):
        assert abs(got - want) < 1e-12


def test_bleu_identity_corpus():
    sents = [s.split() for s in bleu_oracle.CANDIDATES if len(s.split()) >= 4]
    rep = corpus_bleu(sents, [[s] for s in sents])
    assert rep.p == (1.0, 1.0, 1.0, 1.0) and rep.bp == 1.0 and rep.b == (1.0, 1.0, 1.0, 1.0)


def test_clipped_unigram_example():
    rep = corpus_bleu([["the"] * 4], [[["the", "cat"]]])
    assert rep.p[0] == 0.25
    assert rep.b[1] == 0.0  # no bigram matches, no corpus smoothing


def test_brevity_penalty():
    assert abs(brevity_penalty(10, 5) - math.exp(-1)) < 1e-12
    assert brevity_penalty(5, 10) == 1.0


def test_closest_ref_length_tie_goes_shorter():
    assert closest_ref_length(5, [4, 6]) == 4
    assert closest_ref_length(5, [7, 3, 5]) == 5


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


sentence = st.lists(st.sampled_from("abcde"), min_size=1, max_size=8)


@settings(max_examples=50)
@given(st.lists(st.tuples(sentence, st.lists(sentence, min_size=1, max_size=3)), min_size=1, max_size=6), st.randoms())
def test_bleu_permutation_invariant_and_ranges(pairs, rnd):
    cands = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    a = corpus_bleu(cands, refs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    b = corpus_bleu([p[0] for p in shuffled], [p[1] for p in shuffled])
    assert a.matches == b.matches and a.totals == b.totals and a.r == b.r and a.c == b.c
    assert all(0 <= x <= 1 for x in a.p + a.b) and 0 < a.bp <= 1
    assert abs(a.bp - min(1, math.exp(1 - a.r / a.c))) < 1e-15
    if all(x > 0 for x in a.p):
        assert all(a.b[i] >= a.b[i + 1] - 1e-15 for i in range(3))


def test_sentence_bleu_examples():
    assert sentence_bleu("a red circle".split(), "a red circle".split()) == 1.0
    # unigrams 2/3, bigrams 1/2, trigram 0 -> epsilon; 3 orders for a 3-word hypothesis
    want = (2 / 3 * 1 / 2 * 1e-9) ** (1 / 3)
    assert abs(sentence_bleu("a red circle".split(), "a red square".split()) - want) < 1e-15
    assert sentence_bleu("x y z w".split(), "a b c d".split()) < 1e-2
    with pytest.raises(ValueError):
        sentence_bleu([], ["a"])


@given(sentence)
def test_sentence_bleu_self_is_one(x):
    assert abs(sentence_bleu(x, x) - 1.0) < 1e-12


def dense_cider(hyp, refs, docs, max_n=4):
    """Independent oracle: explicit dense TF-IDF vectors over every n-gram seen."""
    total = 0.0
    orders = min(max_n, len(hyp))
    for n in range(1, orders + 1):
        grams = sorted({tuple(s[i:i + n]) for s in [hyp, *refs, *(c for d in docs for c in d)] for i in range(len(s) - n + 1)})
        index = {g: i for i, g in enumerate(grams)}
        idf = np.zeros(len(grams))
        for g, i in index.items():
            df = sum(any(tuple(c[j:j + n]) == g for c in d for j in range(len(c) - n + 1)) for d in docs)
            idf[i] = math.log(len(docs) / max(1, df))

        def vec(s):
            v = np.zeros(len(grams))
            cnt = len(s) - n + 1
            for j in range(cnt):
                v[index[tuple(s[j:j + n])]] += 1.0 / cnt
            return v * idf

        h = vec(hyp)
        sims = []
        for r in refs:
            rv = vec(r) if len(r) >= n else np.zeros(len(grams))
            den = np.linalg.norm(h) * np.linalg.norm(rv)
            sims.append(float(h @ rv / den) if den > 0 else 0.0)
        total += sum(sims) / len(refs)
    return 10 * total / orders


DOCS = [
    [s.split() for s in ["one red circle", "a picture of one red circle"]],
    [s.split() for s in ["two blue squares", "there are two blue squares ."]],
    [s.split() for s in ["three green triangles", "a picture of three green triangles"]],
]


def test_cider_matches_dense_oracle():
    idf = IdfTable.build(DOCS)
    hyp = "a picture of two red circles".split()
    refs = [s.split() for s in ["one red circle", "two red circles", "a picture of red things"]]
    assert abs(sentence_cider(hyp, refs, idf) - dense_cider(hyp, refs, DOCS)) < 1e-12


def test_cider_self_and_disjoint():
    idf = IdfTable.build(DOCS)
    x = "one red circle".split()
    assert abs(sentence_cider(x, [x], idf) - 10.0) < 1e-12
    assert sentence_cider("zebra runs".split(), [x], idf) == 0.0
    with pytest.raises(ValueError):
        sentence_cider([], [x], idf)


def test_idf_values():
    idf = IdfTable.build(DOCS)
    assert abs(idf.idf(("red",)) - math.log(3)) < 1e-15
    assert abs(idf.idf(("picture",)) - math.log(3 / 2)) < 1e-15
    assert abs(idf.idf(("unseen",)) - math.log(3)) < 1e-15


def test_perplexity_examples():
    assert abs(perplexity_from_bits([2.0, 6.0], [2, 2]) - 4.0) < 1e-12
    config = small_config(vocab_size=4)
    p = init_parameters(config, 0)
    for v in p.values():
        v[:] = 0.0
    p["bo"][:] = [0.0, 0.0, -1e3, -1e3]
    ims = [corpus.CaptionedImage("a", np.zeros(config.dim_image), [(0, 0, 1)])]
    assert abs(corpus_perplexity(p, config, ims) - 2.0) < 1e-12


def test_eval_report(tmp_path):
    cands, refs = bleu_oracle.corpus()
    write_eval_report(tmp_path / "r.csv", corpus_bleu(cands, refs), 3.5)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,n,value,p_n,r,c,bp"
    assert len(lines) == 6 and lines[-1].startswith("perplexity")
