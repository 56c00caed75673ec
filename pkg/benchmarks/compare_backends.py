"""Time the numpy and compiled kernels on the same inputs.

Usage: python benchmarks/compare_backends.py [--reps 5] [--out results.csv]
"""

import argparse
import time

import numpy as np
import pandas as pd

from dynsurv._backend import get_kernels
from dynsurv.cox import _sorted, lambda_path
from dynsurv.data import apply_landmark
from dynsurv.lmm import LmmSpec, _subject_stats
from dynsurv.simulate import simulate_prclmm_data


def _cases(seed=0):
    rng = np.random.default_rng(seed)
    n, p = 300, 20
    x = rng.standard_normal((n, p))
    t = rng.exponential(size=n)
    e = (rng.uniform(size=n) < 0.7).astype(float)
    order, ev, gstart = _sorted(t, e)
    xs = np.asfortranarray(x[order])
    lams = lambda_path(xs, ev, gstart, 0.0, 100)

    ds, _ = simulate_prclmm_data(n=1000, p=1, p_relevant=1, seed=seed)
    ds = apply_landmark(ds, 2.0)
    st = _subject_stats(LmmSpec("y1", ("fuptime",), ("fuptime",)), ds.longitudinal, ds.ids)
    lam = np.array([[1.0, 0.0], [0.3, 0.8]])
    D = lam @ lam.T
    ztr = np.ascontiguousarray(st.zty - st.ztw @ np.array([0.0, 0.5]))

    return {
        "cox_path ridge n=300 p=20 (100 lambdas)": lambda k: k.cox_path(
            xs, ev, gstart, lams, 0.0, np.zeros(p), 1e-10, 200, 10000),
        "cox_path lasso n=300 p=20 (100 lambdas)": lambda k: k.cox_path(
            xs, ev, gstart, lams * 1e3, 1.0, np.zeros(p), 1e-10, 200, 10000),
        "cox_loglik n=300 x 100 columns": lambda k: k.cox_loglik(
            np.ascontiguousarray(x[order] @ rng.standard_normal((p, 100))), ev, gstart),
        "lmm_profile 1000 subjects": lambda k: k.lmm_profile(
            st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(st.nobs), lam),
        "blup_batch 1000 subjects": lambda k: k.blup_batch(st.ztz, ztr, D, 0.25),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    backends = {"python": get_kernels("python"), "compiled": get_kernels("compiled")}
    rows = []
    for name, fn in _cases().items():
        for bname, k in backends.items():
            fn(k)  # warm-up
            times = []
            for _ in range(args.reps):
                t0 = time.perf_counter()
                fn(k)
                times.append(time.perf_counter() - t0)
            rows.append({"kernel": name, "backend": bname, "median_s": float(np.median(times))})
    frame = pd.DataFrame(rows).pivot(index="kernel", columns="backend", values="median_s")
    frame["speedup"] = frame["python"] / frame["compiled"]
    print(frame.to_string(float_format=lambda v: f"{v:.4g}"))
    if args.out:
        frame.to_csv(args.out)


if __name__ == "__main__":
    main()
