"""Batched Poisson GLM kernel: numba vs numpy.

    python benchmarks/bench_kernels.py [--n 150] [--m 68] [--K 4] [--repeat 5]

Times the row-wise batch (one GLM per day) and the column-wise batch (one per
interval) with both backends, checks they agree, then times a full factor fit
with each backend switched in.
"""

import argparse
import time

import numpy as np

from ratefactor import _kernels
from ratefactor.factor import AmlConfig, fit_factor_model
from ratefactor.simgen import load_demo_params, simulate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=150)
    ap.add_argument("--m", type=int, default=68)
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    sim = simulate(load_demo_params("MUL"), args.n, seed=1)
    Y = sim.counts.values.astype(float)[:, : args.m]
    eta = np.sqrt(sim.rates[:, : args.m])
    U, S, Vt = np.linalg.svd(eta, full_matrices=False)
    B = U[:, : args.K] * S[: args.K]
    F = Vt[: args.K].T
    link = _kernels.SQRT

    # warm the JIT cache before timing
    _kernels.batch_glm_numba(Y[:2], F, B[:2], link)

    print(f"grid {Y.shape[0]}x{Y.shape[1]}, K={args.K}, best of {args.repeat}")
    print(f"{'batch':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, (YY, XX, b0) in {
        "rows (per day)": (Y, F, B * 0.9),
        "columns (per interval)": (Y.T, B, F * 0.9),
    }.items():
        t_np, r_np = best_of(lambda: _kernels.batch_glm_numpy(YY, XX, b0, link), args.repeat)
        t_nb, r_nb = best_of(lambda: _kernels.batch_glm_numba(YY, XX, b0, link), args.repeat)
        diff = float(np.max(np.abs(r_np[0] - r_nb[0])))
        print(f"{name:<22}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>9.1f}{diff:>12.2e}")

    cfg = AmlConfig(K=args.K)
    saved = _kernels.USE_NUMBA
    fits = {}
    try:
        for flag in (False, True):
            _kernels.USE_NUMBA = flag
            t, fm = best_of(lambda: fit_factor_model(Y, cfg), max(1, args.repeat // 2))
            fits[flag] = (t, fm)
    finally:
        _kernels.USE_NUMBA = saved
    (t_np, f_np), (t_nb, f_nb) = fits[False], fits[True]
    rel = abs(f_np.deviance - f_nb.deviance) / f_np.deviance
    print(f"{'full factor fit':<22}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>9.1f}{rel:>12.2e}  (relative deviance diff)")


if __name__ == "__main__":
    main()
