"""Compare the compiled and numpy MLP kernels on training-sized batches.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from nsync._kernels import _pykernels

try:
    from nsync._kernels import _ckernels
except ImportError:
    _ckernels = None

# (batch, d_in, d_hidden, d_out, n_layers): the fine-tuning step, pretraining step, and a wide layer
SHAPES = [(8, 96, 256, 64, 3), (128, 96, 256, 64, 3), (64, 96, 1024, 64, 3)]


def make_problem(batch, d_in, d_hidden, d_out, n_layers, seed=0):
    rng = np.random.default_rng(seed)
    dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [0.1 * rng.standard_normal(b) for b in dims[1:]]
    x = rng.standard_normal((batch, d_in))
    target = rng.standard_normal((batch, d_out))
    return x, target, weights, biases


def bench(impl, problem, want_weights, repeat):
    x, target, weights, biases = problem
    fn = lambda: impl.mlp_loss_grad(x, target, weights, biases, want_weights)  # noqa: E731
    fn()
    n = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy path only")
    print(f"{'shape (batch,in,hidden,out,layers)':<36}{'grads':<9}" + "".join(f"{n + ' us':>12}" for n, _ in impls) + f"{'speedup':>10}")
    for shape in SHAPES:
        problem = make_problem(*shape)
        for want_weights, label in ((False, "input"), (True, "all")):
            times = [bench(impl, problem, want_weights, args.repeat) for _, impl in impls]
            speed = f"{times[0] / times[1]:>9.2f}x" if len(times) == 2 else ""
            print(f"{str(shape):<36}{label:<9}" + "".join(f"{t * 1e6:>12.1f}" for t in times) + speed)


if __name__ == "__main__":
    main()
