"""Memorize 8 single-caption synthetic images with the Full model."""

import argparse

from mrnn.experiments import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--learning-rate", type=float, default=0.05)
    a = ap.parse_args()
    r = run_overfit(a.seed, a.images, a.epochs, a.learning_rate)
    print(f"train PPL {r.final_perplexity:.5f}")
    print(f"greedy exact {r.exact_captions}/{r.n_images}")
    print(f"R@1 image {r.image_r1:.1f}  sentence {r.sentence_r1:.1f}")
    print(f"{r.seconds:.1f}s")


if __name__ == "__main__":
    main()
