"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 30] [--size 32]

Prints the median time per call for im2col, col2im and the projected sign
step, plus two end-to-end workloads (a FACPA forward pass and a 10-step
I-FGSM), for each backend. Runs single-threaded.
"""

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from nr_attack import attacks, kernels
from nr_attack.generator import init_params


def median_ms(fn, repeat, warmup=3):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter_ns()
        fn()
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    return statistics.median(samples)


def workloads(size):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (8, 16, size, size)).astype(np.float32)
    cols = kernels.im2col(x, 3, 1, 1, impl="python")
    img = rng.uniform(0, 1, (3, size, size)).astype(np.float32)
    g = rng.normal(size=img.shape).astype(np.float32)
    lo, hi = np.clip(img - 0.04, 0, 1), np.clip(img + 0.04, 0, 1)
    gen = init_params(seed=0)
    facpa = attacks.AttackSpec("facpa", generator=gen)
    ifgsm = attacks.AttackSpec("ifgsm", iters=10)

    return {
        "im2col 8x16x%dx%d k3" % (size, size): lambda impl: kernels.im2col(x, 3, 1, 1, impl=impl),
        "col2im 8x16x%dx%d k3" % (size, size): lambda impl: kernels.col2im(cols, x.shape, 3, 1, 1, impl=impl),
        "sign step 3x%dx%d" % (size, size): lambda impl: kernels.projected_sign_step(img.copy(), g, 1e-3, lo, hi, impl=impl),
        "facpa forward": lambda impl: attacks.craft(img, "frozen_cnn:7", facpa),
        "ifgsm@10 frozen_cnn:7": lambda impl: attacks.craft(img, "frozen_cnn:7", ifgsm),
    }


def run(impl_name, fn, repeat):
    impl = kernels._resolve(impl_name)
    saved = kernels._impl
    kernels._impl = impl  # end-to-end workloads go through the module-level backend
    try:
        return median_ms(lambda: fn(impl), repeat)
    finally:
        kernels._impl = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args(argv)

    backends = ["python"]
    try:
        kernels._resolve("cython")
        backends.append("cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")

    with threadpool_limits(limits=1):
        print(f"{'workload':28s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
        for name, fn in workloads(args.size).items():
            times = [run(b, fn, args.repeat) for b in backends]
            row = f"{name:28s}" + "".join(f"{t:10.3f}ms" for t in times)
            if len(times) == 2:
                row += f"  {times[0] / times[1]:8.2f}x"
            print(row)


if __name__ == "__main__":
    main()
