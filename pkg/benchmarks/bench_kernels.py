"""Time every kernel on both backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Prints one key=value line per kernel. The numba timings exclude the first
(compiling) call.
"""

import argparse
import timeit

import numpy as np

from selectkd._kernels import KERNELS


def workloads(scale: float):
    rng = np.random.default_rng(0)
    n = max(1, int(4096 * scale))
    V, n_rows = 32, 32
    P = rng.dirichlet(np.ones(V), size=n)
    Z = rng.normal(size=(n, V))
    Q = rng.dirichlet(np.ones(V), size=n)
    probs = rng.dirichlet(np.ones(V), size=n_rows)
    cum = np.cumsum(probs, axis=1)
    greedy_idx = np.argmax(probs, axis=1).astype(np.int64)
    starts = rng.integers(0, n_rows, size=max(1, n // 32)).astype(np.int64)
    U_roll = rng.random((starts.size, 32))
    rows = rng.integers(0, n_rows, size=n).astype(np.int64)
    scale_w = rng.random(n)
    target = rng.dirichlet(np.ones(V), size=n_rows)
    gamma = 4
    U_spec = rng.random((max(1, n // 4), 2 * gamma + 1))
    states = np.arange(8, dtype=np.int64)
    return {
        "div_grad": lambda k: k["div_grad"](3, 0.1, P, Z),
        "spec_verify": lambda k: k["spec_verify"](P, Q, rng.random((n, 5, 2)), 0.01),
        "rollout": lambda k: k["rollout"](cum, greedy_idx, starts, U_roll, V, n_rows, False),
        "scatter_rows": lambda k: k["scatter_rows"](np.zeros((n_rows, V)), rows, Z, scale_w),
        "spec_decode": lambda k: k["spec_decode"](cum, probs, target, states.copy(), gamma, U_spec, V, n_rows),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args(argv)
    for name, call in workloads(args.scale).items():
        timings = {}
        for backend, table in KERNELS.items():
            call(table)  # warm-up; compiles the numba path
            timings[backend] = min(timeit.repeat(lambda: call(table), number=3, repeat=args.repeat)) / 3
        line = f"kernel={name} " + " ".join(f"{b}_ms={t * 1e3:.3f}" for b, t in timings.items())
        if "numba" in timings:
            line += f" speedup={timings['numpy'] / timings['numba']:.1f}"
        print(line)


if __name__ == "__main__":
    main()
