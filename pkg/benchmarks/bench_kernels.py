"""Time the memory-bank kernels: compiled extension vs NumPy fallback vs a
plain torch gather.

    python benchmarks/bench_kernels.py [--batch 64] [--K 256] [--dim 128] [--N 5000]
"""
import argparse
import json
import timeit

import numpy as np
import torch

from mcl_okd import kernels


def _time(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e3  # ms


def bench(B, K, d, N, dtype, repeat=5, number=20):
    rng = np.random.default_rng(0)
    anchors = rng.standard_normal((B, d)).astype(dtype)
    bank = rng.standard_normal((N, d)).astype(dtype)
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    idx = rng.integers(0, N, size=(B, K))
    weights = rng.standard_normal((B, K)).astype(dtype)
    rows = rng.choice(N, size=B, replace=False)
    values = bank[rng.integers(0, N, size=B)].copy()

    impls = {"numpy": kernels.reference}
    if kernels.compiled is not None:
        impls["cython"] = kernels.compiled
    out = {}
    for name, impl in impls.items():
        scratch = bank.copy()
        out[name] = {
            "gather_dot": _time(lambda: kernels.gather_dot(anchors, bank, idx, impl=impl), repeat, number),
            "gather_weighted_sum": _time(lambda: kernels.gather_weighted_sum(weights, bank, idx, impl=impl), repeat, number),
            "momentum_update": _time(lambda: kernels.momentum_update(scratch, rows, values, 0.5, impl=impl), repeat, number),
        }
    ta, tb, ti = torch.from_numpy(anchors), torch.from_numpy(bank), torch.from_numpy(idx)
    tw = torch.from_numpy(weights)
    out["torch"] = {
        "gather_dot": _time(lambda: torch.einsum("bd,bkd->bk", ta, tb[ti]), repeat, number),
        "gather_weighted_sum": _time(lambda: torch.einsum("bk,bkd->bd", tw, tb[ti]), repeat, number),
    }
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--K", type=int, default=256)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--N", type=int, default=5000)
    ap.add_argument("--json", action="store_true", help="print raw timings as JSON")
    args = ap.parse_args()

    results = {}
    for dtype in (np.float32, np.float64):
        results[np.dtype(dtype).name] = bench(args.batch, args.K, args.dim, args.N, dtype)
    if args.json:
        print(json.dumps(results, indent=2))
        return
    print(f"B={args.batch} K={args.K} d={args.dim} N={args.N}; active backend: {kernels.BACKEND}; times in ms")
    for dtype, per_impl in results.items():
        print(f"\n{dtype}")
        ops = ["gather_dot", "gather_weighted_sum", "momentum_update"]
        print(f"{'impl':<8}" + "".join(f"{op:>22}" for op in ops))
        for name, times in per_impl.items():
            print(f"{name:<8}" + "".join(f"{times[op]:>22.3f}" if op in times else f"{'-':>22}" for op in ops))


if __name__ == "__main__":
    main()
