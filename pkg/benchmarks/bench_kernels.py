"""Time the hot kernels and one training step under both backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--threads N]

Each kernel runs on shapes taken from the default 64x64, batch-4 training
configuration. The numba path is warmed up first so JIT time is excluded.
"""

import argparse
import time

import numpy as np

from cebsnet import kernels, ops
from cebsnet.config import ModelConfig
from cebsnet.model import CEBSNet
from cebsnet.objective import total_loss
from cebsnet.tensor import Tensor


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def kernel_cases(rng):
    x = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 1)
    pooled, idx = kernels.maxpool_forward(x, 2, 2, 0)
    g = rng.standard_normal(pooled.shape).astype(np.float32)
    e = rng.random((8, 20, 20)).astype(np.float32)
    starts = ops.partition(32, 20)
    row_of = ops.region_index(32, 20)
    grid = rng.standard_normal((8, 1, 32, 32)).astype(np.float32)
    return {
        "im2col 3x3 (8,32,32,32)": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 3x3 (8,32,32,32)": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool fwd 2x2": lambda: kernels.maxpool_forward(x, 2, 2, 0),
        "maxpool fwd 3x3 s1 p1": lambda: kernels.maxpool_forward(x, 3, 1, 1),
        "maxpool bwd 2x2": lambda: kernels.maxpool_backward(g, idx, x.shape),
        "region expand k=20 on 32": lambda: kernels.region_expand(e, row_of, row_of),
        "region reduce k=20 on 32": lambda: kernels.region_reduce(grid, starts, starts),
    }


def train_step_case(rng):
    model = CEBSNet(ModelConfig(), seed=0)
    a = rng.random((4, 3, 64, 64)).astype(np.float32)
    b = rng.random((4, 3, 64, 64)).astype(np.float32)
    gt = (rng.random((4, 64, 64)) < 0.1).astype(np.uint8)

    def step():
        model.zero_grad()
        total_loss(model(Tensor(a), Tensor(b)), gt).total.backward()

    return step


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--skip-step", action="store_true", help="skip the full forward+backward timing")
    args = p.parse_args()
    if args.threads:
        kernels.set_threads(args.threads)

    results = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        cases = kernel_cases(np.random.default_rng(0))
        if not args.skip_step:
            cases["train step (64x64, batch 4)"] = train_step_case(np.random.default_rng(0))
        for name, fn in cases.items():
            repeat = max(3, args.repeat // 5) if name.startswith("train") else args.repeat
            results.setdefault(name, {})[backend] = best_of(fn, repeat)

    print(f"{'case':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    print("-" * 64)
    for name, r in results.items():
        n_np, n_nb = r["numpy"][0] * 1e3, r["numba"][0] * 1e3
        print(f"{name:<30}{n_np:>12.3f}{n_nb:>12.3f}{n_np / n_nb:>9.2f}x")


if __name__ == "__main__":
    main()
