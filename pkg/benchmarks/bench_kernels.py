"""Compare the numba kernels with their numpy fallbacks, plus masked vs full student forwards.

Run with ``python3 benchmarks/bench_kernels.py``. Numbers are wall-clock
medians; the first numba call (compilation) is excluded by a warm-up.
"""

import argparse
import time

import numpy as np
import torch

from objnovelty import kernels
from objnovelty._accel import NUMBA_ENABLED
from objnovelty.encoder import VisionTransformer
from objnovelty.mkd import efficiency_report


def median_time(fn, *args, repeats=20):
    fn(*args)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def batched(fn):
    def run(grid, crops):
        return [fn(grid, ys, xs) for ys, xs in crops]
    return run


def cases(rng):
    logits = rng.normal(size=(32 * 196, 10)) / 0.05
    grid = rng.random((14, 14, 10))
    # one 6x6 crop grid per image, a batch of 32 crops
    crops = [(np.sort(rng.uniform(0, 13, 6)), np.sort(rng.uniform(0, 13, 6))) for _ in range(32)]
    scores = np.round(rng.normal(size=5000), 2)
    positive = rng.random(5000) < 0.3
    return [
        ("sinkhorn 6272x10, 3 iters", kernels.sinkhorn_scale_numpy, kernels.sinkhorn_scale_numba, (logits, 3, 0.0)),
        ("sinkhorn 6272x10, 100 iters", kernels.sinkhorn_scale_numpy, kernels.sinkhorn_scale_numba,
         (logits, 100, 0.0)),
        ("bilinear 32 crops of 6x6", batched(kernels.bilinear_grid_numpy), batched(kernels.bilinear_grid_numba),
         (grid, crops)),
        ("rank sum n=5000", kernels.positive_rank_sum_numpy, kernels.positive_rank_sum_numba, (scores, positive)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--skip-forward", action="store_true")
    args = parser.parse_args()

    print(f"numba enabled: {NUMBA_ENABLED}")
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, np_fn, nb_fn, fn_args in cases(np.random.default_rng(0)):
        t_np = median_time(np_fn, *fn_args, repeats=args.repeats)
        t_nb = median_time(nb_fn, *fn_args, repeats=args.repeats)
        print(f"{name:<30}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")

    if not args.skip_forward:
        torch.manual_seed(0)
        student = VisionTransformer(img_size=224, patch_size=16, embed_dim=384, depth=12, num_heads=6)
        images = torch.randn(32, 3, 224, 224)
        print("\nstudent forward, ViT-S/16 geometry, batch 32")
        for row in efficiency_report(student, images, ratio=0.5, repeats=3):
            print(f"  {row['mode']:<8}{row['tokens_per_image']:>5} tokens  {row['seconds']:.3f} s")


if __name__ == "__main__":
    main()
