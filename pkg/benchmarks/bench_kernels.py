"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --repeat 5

Each kernel runs on inputs shaped like the closed-loop workload: a batch
of RK4 rollouts (containment Monte Carlo), a condensed 90-variable QP and the
invariant-radius series for a 5x5 closed loop.
"""
import argparse
import timeit

import numpy as np

from tubempc import _kernels_py, kernels
from tubempc.gains import synthesize_tube_gains
from tubempc.linearization import linearize_discrete
from tubempc.manipulator import ManipulatorParams, initial_state, paper_initial_theta
from tubempc.qp import QuadraticProgram, _stack_constraints


def workloads(rng):
    params = ManipulatorParams.paper()
    z0 = initial_state(paper_initial_theta(), params)
    w = np.array(params.omega_max)

    batch = np.tile(z0, (1000, 1))
    controls = rng.uniform(-w, w, (1000, 8, 3))
    dist = rng.uniform(-0.01, 0.01, (1000, 8, 5))
    rk4 = (batch, controls, 0.1, params.L, dist)

    n = 90
    M = rng.normal(size=(n, n))
    H = M @ M.T / n + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    G = rng.normal(size=(180, n))
    qp = QuadraticProgram(H, g, lb=-0.2 * np.ones(n), ub=0.2 * np.ones(n), G=G, h=np.abs(rng.normal(size=180)) + 0.1)
    C, b, _ = _stack_constraints(qp)
    gi = (H, g, C, b, 1e-11, 5000)

    model = linearize_discrete(z0, 0.5 * w, params, 0.1)
    gains = synthesize_tube_gains(model.Ad, model.Bd, 0.1 * np.eye(5), 0.01 * np.eye(3))
    series = (gains.Acl, 1e-12, 2_000_000)
    return {"rk4_rollout": rk4, "gi_solve": gi, "spectral_norm_series": series}


def bench(fn, args, repeat, number):
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled extension not available; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':22s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}")
    for name, wl in workloads(rng).items():
        t_py = bench(getattr(_kernels_py, name), wl, args.repeat, args.number)
        if kernels.BACKEND == "cython":
            t_c = bench(getattr(kernels, name), wl, args.repeat, args.number)
            print(f"{name:22s} {1e3 * t_py:12.3f} {1e3 * t_c:14.3f} {t_py / t_c:7.1f}x")
        else:
            print(f"{name:22s} {1e3 * t_py:12.3f} {'-':>14s} {'-':>8s}")


if __name__ == "__main__":
    main()
