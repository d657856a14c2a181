"""Eight sequential 45-degree batches at one location; prints the mixture after each update."""

import argparse
import math

import numpy as np

from cliffmap.dynamics_map import CliffMap, GridSpec, update_map
from cliffmap.online import UpdateConfig
from cliffmap.synthetic import toy_eight_directions


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--decay", type=float, default=0.5)
    ap.add_argument("--per-batch", type=int, default=200)
    args = ap.parse_args()

    cfg = UpdateConfig(decay_lambda=args.decay)
    cmap = CliffMap(GridSpec(1, 1))
    for k, batch in enumerate(toy_eight_directions(n_per_batch=args.per_batch, seed=args.seed), start=1):
        cmap = update_map(cmap, batch, cfg)
        m = cmap.cells[0].model
        order = np.argsort(-m.weights)
        parts = [f"{math.degrees(m.means[j, 0]):6.1f} deg w={m.weights[j]:.3f}" for j in order]
        print(f"batch {k} (heading {45 * (k - 1):3d}): " + " | ".join(parts))


if __name__ == "__main__":
    main()
