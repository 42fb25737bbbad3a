"""Measured vs predicted delta norms and angles as the unit size grows."""

import argparse

from stockpot.synthetic import SyntheticSpec, concentration_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--offset-ratio", type=float, default=1.0)
    ap.add_argument("--dims", type=int, nargs="+", default=[100, 1_000, 10_000, 100_000])
    args = ap.parse_args()

    print("dim      norm(pred)  norm(sim)   angle(pred)  angle(sim)  angle std(pred)  angle std(sim)")
    for dim in args.dims:
        spec = SyntheticSpec.build([("w", (dim,))], sigma=0.01, offset_ratio=args.offset_ratio, seed=dim)
        (s,) = concentration_stats(spec, args.samples)
        print(
            f"{dim:<8d} {s.predicted_norm_mean:.5f}     {s.measured_norm_mean:.5f}     "
            f"{s.predicted_angle_deg:7.3f}      {s.measured_angle_deg:7.3f}     "
            f"{s.predicted_angle_std_deg:7.3f}          {s.measured_angle_std_deg:7.3f}"
        )


if __name__ == "__main__":
    main()
