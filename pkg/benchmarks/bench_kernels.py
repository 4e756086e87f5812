"""Time the compiled kernels against the numpy fallback on model-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--rows 20000] [--dim 128] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from nmcdr.numerics import _kernels_py

try:
    from nmcdr.numerics import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def make_inputs(rows: int, cols: int, dim: int, avg_deg: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    deg = rng.poisson(avg_deg, size=rows).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    nnz = int(indptr[-1])
    return {
        "indptr": indptr,
        "indices": rng.integers(0, cols, size=nnz).astype(np.int64),
        "data": rng.random(nnz),
        "x": rng.normal(size=(cols, dim)),
        "edge_x": rng.normal(size=(nnz, dim)),
        "edge_idx": np.repeat(np.arange(rows, dtype=np.int64), deg),
        "scores": rng.normal(size=nnz),
        "grad": rng.normal(size=nnz),
        "rows": rows,
    }


def cases(mod, a: dict) -> dict:
    alpha = mod.segment_softmax(a["scores"], a["indptr"])
    return {
        "csr_spmm": lambda: mod.csr_spmm(a["indptr"], a["indices"], a["data"], a["x"], a["rows"]),
        "scatter_add_rows": lambda: mod.scatter_add_rows(a["edge_x"], a["edge_idx"], a["rows"]),
        "segment_softmax": lambda: mod.segment_softmax(a["scores"], a["indptr"]),
        "segment_softmax_backward": lambda: mod.segment_softmax_backward(alpha, a["grad"], a["indptr"]),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=20000)
    parser.add_argument("--cols", type=int, default=10000)
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--avg-deg", type=int, default=15)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    a = make_inputs(args.rows, args.cols, args.dim, args.avg_deg, args.seed)
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    results = {}
    for name, mod in backends.items():
        for case, fn in cases(mod, a).items():
            results[(case, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    ref, other = cases(_kernels_py, a), cases(backends.get("cython", _kernels_py), a)
    print(f"rows={args.rows} cols={args.cols} dim={args.dim} nnz={len(a['indices'])}")
    print(f"{'kernel':26s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for case in ref:
        py = results[(case, "python")] * 1e3
        cy = results.get((case, "cython"))
        diff = float(np.max(np.abs(np.asarray(ref[case]()) - np.asarray(other[case]()))))
        if cy is None:
            print(f"{case:26s} {py:10.2f} {'n/a':>10s} {'n/a':>8s} {diff:11.1e}")
        else:
            print(f"{case:26s} {py:10.2f} {cy * 1e3:10.2f} {py / (cy * 1e3):8.2f} {diff:11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
