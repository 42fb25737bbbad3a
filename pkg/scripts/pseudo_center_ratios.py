"""Distance of N-model averages to the pseudo-center of an M-model ensemble, relative to one model."""

import argparse
import math

import numpy as np

from stockpot.geometry import distance_to, pseudo_center
from stockpot.merge import uniform_soup
from stockpot.synthetic import default_spec, sample_ensemble

# reference distances for 1, 2, 3 and 5 averaged models
REFERENCE = {1: 13.133, 2: 9.192, 3: 7.439, 5: 5.633}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ensemble", type=int, default=50)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = args.ensemble

    print("N  predicted  simulated(mean+-std)  reference")
    sims = {n: [] for n in (2, 3, 5)}
    for r in range(args.repeats):
        ens = sample_ensemble(default_spec(seed=args.seed + r), m)
        center = pseudo_center(ens.models)
        single = distance_to(ens.models[0], center).global_distance
        for n in sims:
            sims[n].append(distance_to(uniform_soup(ens.models[:n]), center).global_distance / single)
    for n, vals in sims.items():
        predicted = math.sqrt((1 / n - 1 / m) / (1 - 1 / m))
        print(f"{n}  {predicted:.4f}     {np.mean(vals):.4f} +- {np.std(vals):.4f}      {REFERENCE[n] / REFERENCE[1]:.4f}")


if __name__ == "__main__":
    main()
