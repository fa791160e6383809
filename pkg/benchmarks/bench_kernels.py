"""Time the numba kernels against their numpy twins (and the plain-Python loops).

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Numba compile time is excluded: every jitted kernel runs once before timing.
"""

import argparse
import json
import timeit

import numpy as np

from openclinical import _kernels as K


def cases(rng):
    # reward pair scan over every Base-anchored subset of a full visit
    masks = np.array(sorted(range(0, 1 << 13, 2), key=lambda m: (bin(m).count("1"), m)), dtype=np.int64) | 1
    masks = masks[:1024]
    preds = rng.dirichlet(np.ones(2), size=masks.shape[0])
    y = np.array([1.0, 0.0])
    yield "reward_pairs (1024 strategies)", (masks, preds, y), K._reward_pairs_py, K.reward_pairs_loop, K.reward_pairs_numpy

    X = rng.standard_normal((20000, 8))
    C = rng.standard_normal((6, 8))
    yield "nearest_center (20000 x 6)", (X, C), K._nearest_center_py, K.nearest_center_loop, K.nearest_center_numpy

    assign = rng.integers(0, 6, 2048)
    batch = rng.standard_normal((2048, 8))

    def upd(f):
        return lambda: f(C.copy(), np.zeros(6, dtype=np.int64), batch, assign)

    yield "center_update (batch 2048)", None, upd(K._center_update_py), upd(K.center_update_loop), upd(K.center_update_numpy)

    logx = np.log(rng.weibull(2.0, 5000) + 1e-3)
    yield "weibull_sums (5000 samples)", (logx, 1.7), K._weibull_sums_py, K.weibull_sums_loop, K.weibull_sums_numpy


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    ap.add_argument("--skip-python", action="store_true", help="skip the slow uncompiled loops")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    rows = []
    print(f"numba installed: {K.NUMBA_INSTALLED}; default backend: {K.BACKEND}")
    print(f"{'kernel':32s} {'python':>10s} {'numba':>10s} {'numpy':>10s} {'numpy/numba':>12s}")
    for name, inputs, py, loop, vec in cases(rng):
        call = (lambda f: (lambda: f(*inputs))) if inputs is not None else (lambda f: f)
        call(loop)()  # compile
        t_py = None if args.skip_python else best_time(call(py), max(1, args.repeat // 2))
        t_loop = best_time(call(loop), args.repeat)
        t_vec = best_time(call(vec), args.repeat)
        rows.append({"kernel": name, "python_s": t_py, "numba_s": t_loop, "numpy_s": t_vec})
        py_txt = "-" if t_py is None else f"{t_py * 1e3:8.2f}ms"
        print(f"{name:32s} {py_txt:>10s} {t_loop * 1e3:8.2f}ms {t_vec * 1e3:8.2f}ms {t_vec / t_loop:11.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba_installed": K.NUMBA_INSTALLED, "timings": rows}, fh, indent=1)


if __name__ == "__main__":
    main()
