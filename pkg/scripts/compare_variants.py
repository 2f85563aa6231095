"""Train several variants on the 200/50 synthetic split over a range of seeds.

Prints test perplexity and greedy corpus B-1..B-4 per variant and seed, and
the fraction of seeds where the first variant beats each of the others.
"""

import argparse

from mrnn.experiments import compare_variants, synthetic_split
from mrnn.model import Variant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=["full", "rnn-base", "visual-in-rnn"],
                    choices=[v.value for v in Variant])
    ap.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3, 4, 5])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--captions-per-image", type=int, default=3)
    a = ap.parse_args()

    results = {}
    print(f"{'seed':>4} {'variant':28s} {'test PPL':>9} {'B-1':>6} {'B-2':>6} {'B-3':>6} {'B-4':>6} {'sec':>6}")
    for seed in a.seeds:
        data = synthetic_split(seed, a.train, a.test, a.captions_per_image)
        results[seed] = compare_variants(data, seed, a.variants, a.epochs)
        for v, s in results[seed].items():
            b = " ".join(f"{x:6.3f}" for x in s.bleu)
            print(f"{seed:4d} {v:28s} {s.test_perplexity:9.4f} {b} {s.seconds:6.1f}")

    first = a.variants[0]
    for other in a.variants[1:]:
        ppl = sum(results[s][first].test_perplexity < results[s][other].test_perplexity for s in a.seeds)
        b1 = sum(results[s][first].bleu[0] > results[s][other].bleu[0] for s in a.seeds)
        ge = sum(results[s][first].bleu[0] >= results[s][other].bleu[0] for s in a.seeds)
        print(f"{first} vs {other}: lower PPL {ppl}/{len(a.seeds)}, "
              f"higher B-1 {b1}/{len(a.seeds)}, B-1 >= {ge}/{len(a.seeds)}")


if __name__ == "__main__":
    main()
