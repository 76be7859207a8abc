"""Compare the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--out CSV]

Shapes match one desk-scale training step (batch 8, 64 tokens, width 64).
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from unigen import _kernels_py as py

try:
    from unigen import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    x = rng.standard_normal((512, 64))
    h = rng.standard_normal((8, 64, 256))
    logits = rng.standard_normal((512, 73))
    y_sm = py.softmax_fwd(logits)
    y_ln, rstd = py.layer_norm_fwd(x, 1e-6)
    ang = rng.random((64, 32))
    cos, sin = np.cos(ang), np.sin(ang)
    idx = rng.permutation(512)
    img = rng.random((16, 16))
    return {
        "layer_norm_fwd": (x, 1e-6),
        "layer_norm_bwd": (x, y_ln, rstd),
        "softmax_fwd": (logits,),
        "softmax_bwd": (logits, y_sm),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h),
        "scatter_add_rows": (x, idx, 512),
        "rope_rotate": (x.reshape(8, 64, 64), cos, sin),
        "box_sum": (img, 8),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    for name, inputs in cases(rng).items():
        t_py = min(timeit.repeat(lambda: getattr(py, name)(*inputs), number=args.repeat, repeat=3)) / args.repeat
        t_cy = None
        err = None
        if cy is not None:
            t_cy = min(timeit.repeat(lambda: getattr(cy, name)(*inputs), number=args.repeat, repeat=3)) / args.repeat
            a, b = getattr(py, name)(*inputs), getattr(cy, name)(*inputs)
            if isinstance(a, tuple):
                a, b = a[0], b[0]
            err = float(np.max(np.abs(a - b)))
        rows.append((name, t_py * 1e6, None if t_cy is None else t_cy * 1e6, err))
    print(f"{'kernel':18s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, tp, tc, err in rows:
        if tc is None:
            print(f"{name:18s} {tp:10.1f} {'-':>10s}")
        else:
            print(f"{name:18s} {tp:10.1f} {tc:10.1f} {tp / tc:8.2f} {err:10.2e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "numpy_us", "cython_us", "max_abs_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
