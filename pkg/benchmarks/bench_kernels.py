"""Compiled vs numpy kernels at the default map geometry (windows 128/64/32, stride 4).

    python benchmarks/bench_kernels.py [--size 512] [--repeat 5]
"""

import argparse
import time

import numpy as np

from realm import _pykernels
from realm.dream import extract_positions

try:
    from realm import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--stride", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = {"python": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(0)
    regions = np.array([[10, 10, 200, 150], [300, 40, 500, 380]], dtype=np.int64)
    print(f"image {args.size}x{args.size}, stride {args.stride}")
    print(f"{'kernel':<12}{'window':>7}{'patches':>9}" + "".join(f"{k + ' ms':>12}" for k in impls))
    for window in (128, 64, 32):
        grid = extract_positions((args.size, args.size), window, args.stride)
        scores = rng.uniform(0, 2, len(grid))
        boxes = grid.boxes()
        row_acc = [best_of(lambda m=m: m.accumulate_windows(grid.positions, window, scores,
                                                            args.size, args.size), args.repeat)
                   for m in impls.values()]
        row_ovl = [best_of(lambda m=m: m.overlap_fractions(boxes, regions), args.repeat) for m in impls.values()]
        print(f"{'accumulate':<12}{window:>7}{len(grid):>9}" + "".join(f"{t * 1e3:>12.2f}" for t in row_acc))
        print(f"{'overlap':<12}{window:>7}{len(grid):>9}" + "".join(f"{t * 1e3:>12.2f}" for t in row_ovl))


if __name__ == "__main__":
    main()
