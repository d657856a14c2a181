"""Plan across the loop map with maps snapshotted right after the flow switch."""

import argparse
import sys

from cliffmap.dynamics_map import GridSpec, VelocityBatch, build_map
from cliffmap.evaluation import run_experiment
from cliffmap.ingestion import BatchPlan, make_batches
from cliffmap.planner import PlannerConfig, path_flow_alignment, plan, write_path_csv
from cliffmap.synthetic import loop_corridor_map, loop_scenario, two_condition_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--csv", action="store_true", help="print the online path as CSV")
    args = ap.parse_args()

    obstacles = loop_corridor_map()
    data = two_condition_dataset(obstacles, loop_scenario(n_trajectories=300, seed=args.seed))
    batches = make_batches(data, BatchPlan(3600.0, 0.1, args.seed))
    grid = GridSpec(obstacles.width, obstacles.height)
    half = len(batches) // 2
    report = run_experiment(batches, grid, variants=("online", "history"), timing=False, snapshots=(half + 1,))
    # flow as it really is after the switch
    truth = build_map(grid, VelocityBatch.concat([train for train, _ in batches[half:]]))
    start, goal = (24, 5), (24, 42)
    cfg = PlannerConfig(alpha=args.alpha)
    for v, run in report.runs.items():
        cmap = run.snapshots[half + 1]
        result = plan(obstacles, cmap, start, goal, cfg)
        side = "top" if min(r for r, _ in result.path) < obstacles.height // 4 else "bottom"
        print(f"{v:8s} cost={result.cost:.2f} steps={len(result.path)} via {side} corridor, "
              f"alignment to current flow {path_flow_alignment(result.path, truth):.3f} rad")
        if args.csv and v == "online":
            write_path_csv(result, cmap, sys.stdout)


if __name__ == "__main__":
    main()
