"""Time the compiled and pure-numpy primal-dual kernels on the same problems.

Usage: python3 benchmarks/bench_kernels.py [--n 200] [--iters 2000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from psfcenter.bench import ScenarioConfig, corrupt, generate_scene, replicate_rng, scene_rng
from psfcenter.formulations import build_system
from psfcenter.kernels import get_backend
from psfcenter.prox import LossSpec
from psfcenter.solvers import warm_start


def problem(n, model, seed=0):
    config = ScenarioConfig(n=n, seed=seed)
    obs = corrupt(generate_scene(config, scene_rng(seed)), config, replicate_rng(seed, 0))
    return build_system(obs, model)


def run(kernel, system, loss, iters):
    x0 = warm_start(system)
    lower = np.full(system.cols, -np.inf)
    upper = np.full(system.cols, np.inf)
    dcols = system.d_columns if system.d_columns is not None else np.zeros((system.n_obs, 3))
    blocks = system.blocks if system.blocks is not None else np.zeros((system.n_obs, 3, 3))
    t = 10.0 if loss.kind.is_huber else 0.0
    start = time.perf_counter()
    # rtol = 0 forces the full iteration count
    x, it, *_ = kernel(int(system.layout.value), blocks, system.weights, dcols, system.y,
                       loss.kind.code, t, 1e-3, lower, upper, x0, iters, 0.0)
    return time.perf_counter() - start, it, x


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        compiled = get_backend("cython").pd_loop
    except ImportError:
        compiled = None
    python = get_backend("python").pd_loop
    print(f"{'model':>5} {'loss':>12} {'python us/it':>13} {'cython us/it':>13} {'speedup':>8} "
          f"{'max |dx|':>10}")
    for model in (1, 2):
        system = problem(args.n, model)
        for name in ("sq", "l1", "block-l2", "huber:t=10"):
            loss = LossSpec.parse(name)
            tp = min(run(python, system, loss, args.iters)[0] for _ in range(args.repeat))
            xp = run(python, system, loss, args.iters)[2]
            if compiled is None:
                print(f"{model:>5} {name:>12} {1e6 * tp / args.iters:>13.1f} {'n/a':>13}")
                continue
            tc = min(run(compiled, system, loss, args.iters)[0] for _ in range(args.repeat))
            xc = run(compiled, system, loss, args.iters)[2]
            print(f"{model:>5} {name:>12} {1e6 * tp / args.iters:>13.1f} "
                  f"{1e6 * tc / args.iters:>13.1f} {tp / tc:>8.1f} "
                  f"{np.max(np.abs(xp - xc)):>10.2e}")


if __name__ == "__main__":
    main()
