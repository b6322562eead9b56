"""Numba vs pure-numpy kernels, plus a full stacked SAC update under each path.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --updates 300 --repeat 7

Kernel timings come from the ``numba_kernels`` / ``numpy_kernels`` tables in
one process. The end-to-end update timing starts one subprocess per path
because the flag is read at import time.
"""

import argparse
import math
import os
import subprocess
import sys
import timeit

import numpy as np

from piekd import kernels

UPDATE_SNIPPET = """
import time, numpy as np
from piekd import envs, kernels
from piekd.ensemble import init_ensemble, run_updates
spec = envs.Pendulum.spec
s = init_ensemble(spec, {k}, 0)
r = np.random.default_rng(0)
env = envs.Pendulum()
for _ in range(10):
    s.buffer.append(envs.rollout(env, lambda o: r.uniform(spec.low, spec.high), r))
run_updates(s, 10)
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    run_updates(s, {updates})
    best = min(best, (time.perf_counter() - t) / {updates})
print(kernels.USE_NUMBA, best * 1e3)
"""


def best_of(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def kernel_cases(rng):
    # shapes as they occur for K=3 members with 64x64 networks and batch 128
    n_q = 2 * (4 * 64 + 64 + 64 * 64 + 64 + 64 + 1)
    p, g = rng.normal(size=(3, n_q)), rng.normal(size=(3, n_q))
    m, v = np.zeros_like(p), np.zeros_like(p)
    step_size, bc2 = np.full(3, 3e-4), np.full(3, 0.5)
    active = np.ones(3, dtype=bool)
    target = p.copy()
    z = rng.normal(size=(6, 128, 64))
    b = rng.normal(size=(6, 1, 64))
    y = np.maximum(z, 0.0)
    gz = rng.normal(size=z.shape)
    out, gb = np.empty_like(z), np.empty((6, 1, 64))

    def zcopy():
        return z.copy()

    return {
        "adam_update": lambda t: t["adam_update"](p, g, m, v, step_size, bc2, 0.9, 0.999, 1e-8, active),
        "polyak_update": lambda t: t["polyak_update"](target, p, 0.005, active),
        "bias_relu": lambda t: t["bias_relu"](zcopy(), b),
        "relu_grad": lambda t: t["relu_grad"](gz, y, out, gb),
    }


def pendulum_case(step):
    def run():
        th, thdot = 0.3, -0.2
        for _ in range(200):
            th, thdot, _ = step(th, thdot, 0.5, 0.05, 10.0, 1.0, 1.0, 8.0)

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--number", type=int, default=200, help="calls per timing sample")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--updates", type=int, default=100, help="SAC updates per end-to-end sample")
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--skip-update", action="store_true")
    args = ap.parse_args(argv)

    if not kernels.numba_kernels:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':<16}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in cases.items():
        call(kernels.numba_kernels)  # compile outside the timing
        t_np = best_of(lambda: call(kernels.numpy_kernels), args.number, args.repeat)
        t_nb = best_of(lambda: call(kernels.numba_kernels), args.number, args.repeat)
        print(f"{name:<16}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")

    # the pendulum kernel runs once per environment step (200 per episode)
    from piekd.kernels import _pendulum_np

    nb_step = kernels.pendulum_step if kernels.USE_NUMBA else None
    if nb_step is not None:
        t_np = best_of(pendulum_case(_pendulum_np), 20, args.repeat)
        t_nb = best_of(pendulum_case(nb_step), 20, args.repeat)
        print(f"{'pendulum x200':<16}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")

    if args.skip_update:
        return 0
    snippet = UPDATE_SNIPPET.format(k=args.k, repeat=args.repeat, updates=args.updates)
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, PIEKD_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", snippet], env=env, capture_output=True, text=True, check=True)
        _, ms = out.stdout.split()
        results[flag] = float(ms)
    ratio = results["1"] / results["0"]
    print(f"\nfull SAC update, K={args.k}: numpy {results['1']:.2f} ms, numba {results['0']:.2f} ms ({ratio:.2f}x)")
    return 0 if all(map(math.isfinite, results.values())) else 1


if __name__ == "__main__":
    sys.exit(main())
