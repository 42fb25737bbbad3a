"""Simulate noisy fine-tuning runs with and without periodic merging."""

import argparse

import numpy as np

from stockpot.geometry import distance_to
from stockpot.merge import periodic_merge_replay
from stockpot.synthetic import TrajectoryParams, default_spec, simulate_trajectories


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=2)
    ap.add_argument("--eta", type=float, default=0.5)
    ap.add_argument("--decay", type=float, default=0.8)
    args = ap.parse_args()
    seeds = list(range(args.seeds))

    rebranch = TrajectoryParams.decaying(args.epochs, args.eta, decay=args.decay, rebranch=True)
    post = TrajectoryParams.decaying(args.epochs, args.eta, decay=args.decay)
    rows = {"rebranch merged": [], "rebranch endpoint": [], "post-hoc merged": [], "post-hoc endpoint": []}
    wins = 0
    for run in range(args.runs):
        spec = default_spec(seed=run)
        sim = simulate_trajectories(spec, rebranch, seeds)
        target = sim.centers[-1]
        merged = distance_to(sim.merged[-1], target).global_distance
        ends = [distance_to(t[-1], target).global_distance for t in sim.trajectories]
        wins += merged < min(ends)
        rows["rebranch merged"].append(merged)
        rows["rebranch endpoint"].append(np.mean(ends))

        plain = simulate_trajectories(spec, post, seeds)
        replay = periodic_merge_replay(plain.anchor, [t[-1:] for t in plain.trajectories])
        target = plain.centers[-1]
        rows["post-hoc merged"].append(distance_to(replay.final, target).global_distance)
        rows["post-hoc endpoint"].append(np.mean([distance_to(t[-1], target).global_distance for t in plain.trajectories]))

    print(f"rebranch merge closer than every endpoint in {wins}/{args.runs} runs")
    for name, vals in rows.items():
        print(f"{name:<18s} mean distance to final center {np.mean(vals):.5f}")


if __name__ == "__main__":
    main()
