"""Greedy generation time at full layer sizes (M=3000, 128/256/512, 4096-d image)."""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from mrnn.decode import DecodeLimits, generate_greedy
from mrnn.model import MRnnConfig, init_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--vocab", type=int, default=3000)
    ap.add_argument("--image-dim", type=int, default=4096)
    ap.add_argument("--words", type=int, default=20)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args()
    config = MRnnConfig(vocab_size=a.vocab, dim_image=a.image_dim)
    p = init_parameters(config, 0)
    p["bo"][1] = -50.0
    img = np.random.default_rng(0).normal(size=a.image_dim)
    lim = DecodeLimits(a.words + 1)
    with threadpool_limits(limits=a.threads):
        generate_greedy(p, config, img, lim)
        times = []
        for _ in range(a.repeats):
            t0 = time.perf_counter()
            generate_greedy(p, config, img, lim)
            times.append(time.perf_counter() - t0)
    print(f"{a.words}-word sentence: median {1000 * np.median(times):.2f} ms, "
          f"min {1000 * min(times):.2f} ms over {a.repeats} runs")


if __name__ == "__main__":
    main()
