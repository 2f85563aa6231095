"""Oracle vs consensus reranking on the synthetic test split, plus the normalization ablation."""

import argparse
import statistics

from mrnn.experiments import compare_variants, normalization_ablation, rerank_bounds, synthetic_split


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--m", type=int, default=15)
    a = ap.parse_args()

    data = synthetic_split(a.seed)
    compare_variants(data, a.seed, ["full"], a.epochs)
    model = data.models["full"]
    norm, raw = normalization_ablation(model, data)
    print(f"sentence retrieval R@1: normalized {norm:.1f}, raw {raw:.1f}")
    for sim in ("bleu", "cider"):
        for refined in (False, True):
            b = rerank_bounds(model, data, sim, a.n, a.k, a.m, refined)
            held = sum(x.oracle_top1 >= x.consensus_top1 for x in b)
            print(
                f"{sim:5s} {'refined' if refined else 'original':8s} "
                f"beam {statistics.fmean(x.beam_top1 for x in b):.4f}  "
                f"consensus {statistics.fmean(x.consensus_top1 for x in b):.4f}  "
                f"oracle {statistics.fmean(x.oracle_top1 for x in b):.4f}  bound held {held}/{len(b)}"
            )


if __name__ == "__main__":
    main()
