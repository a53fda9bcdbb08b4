"""Time the numba and pure-numpy kernel paths on representative shapes.

    python3 benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import time

import numpy as np

from kneeaug import kernels
from kneeaug.kernels import NUMBA_IMPLS, NUMPY_IMPLS


def cases(rng):
    img = rng.uniform(0, 255, (224, 224))
    inv = np.array([[0.94, -0.34, 4.0], [0.34, 0.94, -3.0]])
    x = rng.normal(size=(8, 16, 32, 32))
    w = rng.normal(size=(16, 16, 3, 3))
    b = np.zeros(16)
    dw_in = rng.normal(size=(8, 32, 32, 32))
    dw = rng.normal(size=(32, 1, 3, 3))
    out = kernels.conv_forward(x, w, b, impl=NUMPY_IMPLS["conv_fwd"])
    pooled, arg = kernels.maxpool_forward(x, 2, 2, impl=NUMPY_IMPLS["pool_fwd"])
    return {
        "resize 224->448": ("resize", lambda f: kernels.bilinear_resize(img, 448, 448, impl=f)),
        "affine warp 224": ("warp", lambda f: kernels.affine_warp(img, inv, impl=f)),
        "conv fwd 8x16x32x32 k3": ("conv_fwd", lambda f: kernels.conv_forward(x, w, b, impl=f)),
        "conv bwd 8x16x32x32 k3": ("conv_bwd", lambda f: kernels.conv_backward(x, w, out, impl=f)),
        "depthwise fwd 8x32x32x32": ("conv_fwd", lambda f: kernels.conv_forward(dw_in, dw, np.zeros(32),
                                                                                  groups=32, impl=f)),
        "pool fwd 2/2": ("pool_fwd", lambda f: kernels.maxpool_forward(x, 2, 2, impl=f)),
        "pool bwd 2/2": ("pool_bwd", lambda f: kernels.maxpool_backward(pooled, arg, 2, 2, x.shape, impl=f)),
    }


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (key, run) in cases(rng).items():
        nb, npy = NUMBA_IMPLS[key], NUMPY_IMPLS[key]
        run(nb)  # compile outside the timed region
        a, b = run(nb), run(npy)
        same = all(np.allclose(p, q) for p, q in zip(a if isinstance(a, tuple) else (a,),
                                                       b if isinstance(b, tuple) else (b,)))
        t_nb, t_np = best_of(lambda: run(nb), args.repeats), best_of(lambda: run(npy), args.repeats)
        flag = "" if same else "  MISMATCH"
        print(f"{name:28s} {t_nb * 1e3:10.2f} {t_np * 1e3:10.2f} {t_np / t_nb:7.1f}x{flag}")


if __name__ == "__main__":
    main()
