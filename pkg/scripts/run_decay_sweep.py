"""Aggregate NLL of the online variant for decay rates 0.1 ... 0.9."""

import argparse

import numpy as np

from cliffmap.dynamics_map import GridSpec
from cliffmap.evaluation import decay_sweep
from cliffmap.ingestion import BatchPlan, make_batches
from cliffmap.synthetic import loop_corridor_map, loop_scenario, two_condition_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trajectories", type=int, default=300)
    args = ap.parse_args()

    obstacles = loop_corridor_map()
    data = two_condition_dataset(obstacles, loop_scenario(n_trajectories=args.trajectories, seed=args.seed))
    batches = make_batches(data, BatchPlan(3600.0, 0.1, args.seed))
    lambdas = [round(0.1 * i, 1) for i in range(1, 10)]
    sweep = decay_sweep(batches, lambdas, GridSpec(obstacles.width, obstacles.height))
    agg = np.array([sweep[lam].aggregate_nll for lam in lambdas])
    for lam, v in zip(lambdas, agg):
        print(f"lambda={lam:.1f} aggregate nll={v:.4f}")
    print(f"spread {(agg.max() - agg.min()) / agg.mean():.1%} of mean")


if __name__ == "__main__":
    main()
