"""Compare the closed-form merge ratio with a brute-force scan on synthetic ensembles."""

import argparse

import numpy as np

from stockpot.geometry import Granularity, Kind
from stockpot.merge import stock_merge
from stockpot.synthetic import SyntheticSpec, brute_force_optimal_t, sample_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--dims", type=int, nargs="+", default=[10_000, 100_000])
    ap.add_argument("--models", type=int, nargs="+", default=[2, 3, 4])
    ap.add_argument("--offset-ratio", type=float, default=1.0)
    ap.add_argument("--grid-step", type=float, default=0.001)
    args = ap.parse_args()

    print("dim      N  mean|dt|  p95|dt|   max|dt|  mean t")
    for dim in args.dims:
        for n in args.models:
            errs, ts = [], []
            for trial in range(args.trials):
                spec = SyntheticSpec.build(
                    [(f"u{i}", (dim,)) for i in range(3)], sigma=0.01, offset_ratio=args.offset_ratio, seed=trial
                )
                ens = sample_ensemble(spec, n)
                _, report = stock_merge(ens.anchor, ens.models, Granularity(Kind.GLOBAL))
                t = report.units[0].t
                t_star, _ = brute_force_optimal_t(ens.anchor, ens.models, ens.center, args.grid_step)
                errs.append(abs(t - t_star))
                ts.append(t)
            errs = np.array(errs)
            print(
                f"{3 * dim:<8d} {n}  {errs.mean():.5f}   {np.quantile(errs, 0.95):.5f}   {errs.max():.5f}   {np.mean(ts):.4f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
