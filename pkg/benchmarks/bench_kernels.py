"""Benchmark the compiled kernel extension against the numpy fallback.

Shapes mirror the training workloads: the digit backbone's convolutions
on a 64-image pair batch and the kernel activations on both dense and
convolutional feature maps.

Run:  python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from kaf_oneshot._kernels import available_backends, get_backend
from kaf_oneshot.kaf import make_dictionary


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    conv1_x = rng.normal(size=(64, 1, 28, 28))
    conv1_w = rng.normal(size=(20, 1, 5, 5))
    conv2_x = rng.normal(size=(64, 20, 12, 12))
    conv2_w = rng.normal(size=(50, 20, 5, 5))
    pool_x = rng.normal(size=(64, 20, 24, 24))
    d, gamma = make_dictionary(20, 3.0)
    kaf_dense = rng.normal(size=(64, 500))
    kaf_dense_a = rng.normal(0, 0.3, size=(500, 20))
    kaf_map = rng.normal(size=(10 * 24 * 24, 32))
    kaf_map_a = rng.normal(0, 0.3, size=(32, 20))
    kaf2d_x = rng.normal(size=(64, 500))
    kaf2d_a = rng.normal(0, 0.3, size=(250, 400))

    def make(backend):
        g_conv1 = rng.normal(size=(64, 20, 24, 24))
        g_conv2 = rng.normal(size=(64, 50, 8, 8))
        g_dense = rng.normal(size=kaf_dense.shape)
        g_map = rng.normal(size=kaf_map.shape)
        g_2d = rng.normal(size=(64, 250))
        _, argmax = backend.maxpool2d_forward(pool_x, 2)
        g_pool = rng.normal(size=(64, 20, 12, 12))
        return {
            "conv2d fwd 1->20 k5": lambda: backend.conv2d_forward(conv1_x, conv1_w, np.zeros(20), 1),
            "conv2d bwd 1->20 k5": lambda: backend.conv2d_backward(conv1_x, conv1_w, 1, g_conv1),
            "conv2d fwd 20->50 k5": lambda: backend.conv2d_forward(conv2_x, conv2_w, np.zeros(50), 1),
            "conv2d bwd 20->50 k5": lambda: backend.conv2d_backward(conv2_x, conv2_w, 1, g_conv2),
            "maxpool fwd 20x24x24": lambda: backend.maxpool2d_forward(pool_x, 2),
            "maxpool bwd 20x24x24": lambda: backend.maxpool2d_backward(g_pool, argmax, 24, 24),
            "kaf fwd dense 500xD20": lambda: backend.kaf_forward(kaf_dense, d, kaf_dense_a, gamma),
            "kaf bwd dense 500xD20": lambda: backend.kaf_backward(kaf_dense, d, kaf_dense_a, gamma, g_dense),
            "kaf fwd map 5760x32": lambda: backend.kaf_forward(kaf_map, d, kaf_map_a, gamma),
            "kaf bwd map 5760x32": lambda: backend.kaf_backward(kaf_map, d, kaf_map_a, gamma, g_map),
            "kaf2d fwd 250 pairs": lambda: backend.kaf2d_forward(kaf2d_x, d, kaf2d_a, gamma),
            "kaf2d bwd 250 pairs": lambda: backend.kaf2d_backward(kaf2d_x, d, kaf2d_a, gamma, g_2d),
        }

    return make


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="best-of repeats per kernel")
    args = parser.parse_args()

    names = available_backends()
    if "fast" not in names:
        print("compiled extension not built; benchmarking the numpy fallback only")
    make = cases(np.random.default_rng(0))
    tables = {name: make(get_backend(name)) for name in names}

    print(f"{'kernel':24s} " + " ".join(f"{n:>12s}" for n in names) +
          ("      speedup" if len(names) > 1 else ""))
    for case in tables[names[0]]:
        row = [timeit(tables[n][case], args.repeats) for n in names]
        line = f"{case:24s} " + " ".join(f"{1e3 * t:9.2f} ms" for t in row)
        if len(row) > 1:
            line += f"   {row[0] / row[1]:8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
