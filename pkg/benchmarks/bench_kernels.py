"""Compare the compiled and pure-numpy kernels on CfC scans and feature deltas.

Usage: python benchmarks/bench_kernels.py [--batch 64] [--steps 48] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from ctformer import _pykernels, kernels


def scan_args(rng, b, t, d_in, d_h, units):
    return (rng.standard_normal((b, t, units)), rng.standard_normal((d_h, units)) * 0.3,
            rng.standard_normal((units, 3 * d_h)) * 0.3, rng.standard_normal(3 * d_h) * 0.1,
            rng.uniform(0.0, 3.0, (b, t)), np.full(b, t, dtype=np.int64))


def delta_args(rng, b, t, f):
    ts = np.cumsum(rng.uniform(0.5, 2.0, (b, t)), axis=1)
    mask = (rng.random((b, t, f)) < 0.6).astype(float)
    return ts, mask, np.full(b, t, dtype=np.int64)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--steps", type=int, default=48)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--units", type=int, default=32)
    ap.add_argument("--features", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    impls = {"python": _pykernels}
    if kernels.BACKEND == "cython":
        from ctformer import _ckernels
        impls["cython"] = _ckernels
    else:
        print("compiled kernels unavailable; timing the numpy fallback only")
    sargs = scan_args(rng, a.batch, a.steps, a.features, a.hidden, a.units)
    dargs = delta_args(rng, a.batch, a.steps, a.features)
    g = rng.standard_normal((a.batch, a.steps, a.hidden))
    rows = []
    for name, impl in impls.items():
        _, cache = kernels.cfc_scan_forward(*sargs, impl=impl)
        fwd = best_of(lambda: kernels.cfc_scan_forward(*sargs, impl=impl), a.repeat)
        bwd = best_of(lambda: kernels.cfc_scan_backward(g, sargs[1], sargs[2], sargs[4], sargs[5], cache,
                                                        impl=impl), a.repeat)
        dl = best_of(lambda: kernels.feature_deltas(*dargs, impl=impl), a.repeat)
        rows.append((name, fwd, bwd, dl))
    print(f"batch={a.batch} steps={a.steps} hidden={a.hidden} units={a.units} features={a.features}")
    print(f"{'backend':<8} {'scan fwd ms':>12} {'scan bwd ms':>12} {'deltas ms':>10}")
    for name, fwd, bwd, dl in rows:
        print(f"{name:<8} {fwd * 1e3:12.2f} {bwd * 1e3:12.2f} {dl * 1e3:10.2f}")
    if len(rows) == 2:
        (_, pf, pb, pd), (_, cf, cb, cd) = rows
        print(f"{'speedup':<8} {pf / cf:11.1f}x {pb / cb:11.1f}x {pd / cd:9.1f}x")


if __name__ == "__main__":
    main()
