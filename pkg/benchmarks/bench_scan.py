"""Selective-scan timing: numba kernels vs the numpy fallback vs the torch tree scan.

    python benchmarks/bench_scan.py [--repeat 5] [--sizes 64x128 256x128 ...]

Each size is ``L x d_inner`` with batch 8 and state 16 (the desk classifier's
shape family). Times are the best of ``--repeat`` runs; the numba column
excludes JIT compilation (one warm-up call first). ``GFEMAMBA_DISABLE_NUMBA``
does not matter here, both kernel families are called explicitly.
"""
import argparse
import time

import numpy as np
import torch

from gfemamba import kernels
from gfemamba.mamba import selective_scan


def inputs(L, di, nb=8, S=16, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((nb, L, di))
    delta = np.log1p(np.exp(rng.standard_normal((nb, L, di)) - 3.0))
    A = -np.tile(np.arange(1, S + 1, dtype=np.float64), (di, 1))
    B = rng.standard_normal((nb, L, S))
    C = rng.standard_normal((nb, L, S))
    D = np.ones(di)
    return u, delta, A, B, C, D


def best(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def bench(L, di, repeat):
    args = inputs(L, di)
    gy = np.ones_like(args[0])
    y, hs = kernels.scan_forward_numba(*args)  # compile
    kernels.scan_backward_numba(gy, *args, hs)
    row = {
        "numba fwd": best(lambda: kernels.scan_forward_numba(*args), repeat),
        "numba bwd": best(lambda: kernels.scan_backward_numba(gy, *args, hs), repeat),
        "numpy fwd": best(lambda: kernels.scan_forward_numpy(*args), repeat),
        "numpy bwd": best(lambda: kernels.scan_backward_numpy(gy, *args, hs), repeat),
    }
    t_args = [torch.from_numpy(a) for a in args]
    with torch.no_grad():
        row["torch tree fwd"] = best(lambda: selective_scan(*t_args, mode="parallel"), repeat)
    y_np = kernels.scan_forward_numpy(*args)[0]
    row["max |numba - numpy|"] = float(np.abs(y - y_np).max())
    return row


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--sizes", nargs="+", default=["64x128", "256x128", "1024x128", "256x512"])
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    torch.set_num_threads(args.threads)
    header = None
    for size in args.sizes:
        L, di = (int(v) for v in size.split("x"))
        row = bench(L, di, args.repeat)
        if header is None:
            header = list(row)
            print(f"{'L x d_inner':>12} " + " ".join(f"{h:>19}" for h in header))
        cells = [f"{v * 1e3:16.2f} ms" if "|" not in k else f"{v:19.1e}" for k, v in row.items()]
        print(f"{size:>12} " + " ".join(cells))
        speed = row["numpy fwd"] / row["numba fwd"], row["numpy bwd"] / row["numba bwd"]
        print(f"{'':>12} numba speed-up: forward {speed[0]:.1f}x, backward {speed[1]:.1f}x")


if __name__ == "__main__":
    main()
