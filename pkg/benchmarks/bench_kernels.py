"""Numba vs numpy backend: per-kernel and whole-training-step timings.

Shapes are those of the default toy net at batch 64. Every measurement
discards the first warmup calls (numba compiles on first use) and reports
median and inter-quartile range in microseconds, plus the numpy/numba ratio.
The two backends are also checked to agree before timing.

    python benchmarks/bench_kernels.py [--reps 200] [--warmup 5] [--csv out.csv]
"""

import argparse
import csv
import sys
import time

import numpy as np

from drift import _kernels, set_backend
from drift.diffusion import NetConfig, NoiseSchedule, PolicyNet, ddpm_loss
from drift.numerics import Adam, backward


def timeit(fn, reps, warmup):
    out = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        fn()
        if i >= warmup:
            out.append((time.perf_counter() - t0) * 1e6)
    q1, med, q3 = np.percentile(out, [25, 50, 75])
    return med, q3 - q1


def kernel_cases(rng):
    B, C_in, C_out, L, k = 64, 64, 64, 4, 3
    x = rng.standard_normal((B, C_in, L)).astype(np.float32)
    w = rng.standard_normal((C_out, C_in, k)).astype(np.float32)
    g = rng.standard_normal((B, C_out, L)).astype(np.float32)
    gn_x = rng.standard_normal((B, 64, 8)).astype(np.float32)
    gn_w = np.ones(64, np.float32)
    gn_b = np.zeros(64, np.float32)
    _, xhat, inv = _kernels.group_norm_forward(gn_x, 8, gn_w, gn_b)
    p = rng.standard_normal(64 * 64 * 3).astype(np.float32)
    pg = rng.standard_normal(p.size).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    return {
        "conv1d_forward": lambda: _kernels.conv1d_forward(x, w, 1, 1),
        "conv1d_backward": lambda: _kernels.conv1d_backward(g, x, w, 1, 1),
        "group_norm_forward": lambda: _kernels.group_norm_forward(gn_x, 8, gn_w, gn_b),
        "group_norm_backward": lambda: _kernels.group_norm_backward(gn_x, xhat, inv, 8, gn_w),
        "adam_update": lambda: _kernels.adam_update(p, pg, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def train_step_case():
    net = PolicyNet(NetConfig(), seed=0)
    ns = NoiseSchedule.linear(100)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (64, 2, 8)).astype(np.float32)
    obs = rng.standard_normal((64, 12)).astype(np.float32)
    opt = Adam(1e-4)
    params = net.parameters()

    def step():
        for p in params.values():
            p.grad = None
        backward(ddpm_loss(net, x0, obs, ns, rng))
        opt.step(params)

    return step


def check_agreement(rng):
    x = rng.standard_normal((8, 16, 8))
    w = rng.standard_normal((32, 16, 3))
    out = {}
    for name in ("numpy", "numba"):
        set_backend(name)
        out[name] = _kernels.conv1d_forward(x, w, 1, 1)
    err = np.max(np.abs(out["numpy"] - out["numba"]))
    if err > 1e-10:
        sys.exit(f"backends disagree on conv1d_forward: max |diff| = {err:.3g}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--step-reps", type=int, default=30)
    ap.add_argument("--csv", help="write the table here as well")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    check_agreement(np.random.default_rng(1))

    rows = []
    for name in kernel_cases(np.random.default_rng(0)):
        res = {}
        for backend in ("numba", "numpy"):
            set_backend(backend)
            fn = kernel_cases(np.random.default_rng(0))[name]
            res[backend] = timeit(fn, args.reps, args.warmup)
        rows.append((name, *res["numba"], *res["numpy"]))
    res = {}
    for backend in ("numba", "numpy"):
        set_backend(backend)
        res[backend] = timeit(train_step_case(), args.step_reps, args.warmup)
    rows.append(("train_step", *res["numba"], *res["numpy"]))
    set_backend("numba")

    header = ["kernel", "numba_us_median", "numba_us_iqr", "numpy_us_median", "numpy_us_iqr", "numpy_over_numba"]
    table = [[n, f"{a:.1f}", f"{b:.1f}", f"{c:.1f}", f"{d:.1f}", f"{c / a:.2f}"] for n, a, b, c, d in rows]
    widths = [max(len(str(r[i])) for r in [header, *table]) for i in range(len(header))]
    for r in [header, *table]:
        print("  ".join(str(c).rjust(w) for c, w in zip(r, widths)))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            csv.writer(fh).writerows([header, *table])


if __name__ == "__main__":
    main()
