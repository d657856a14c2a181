"""Online vs history vs interval on the two-condition loop-corridor scenario."""

import argparse
import time

from cliffmap.dynamics_map import GridSpec, VelocityBatch
from cliffmap.evaluation import map_nll, run_experiment, write_report
from cliffmap.ingestion import BatchPlan, make_batches
from cliffmap.synthetic import loop_corridor_map, loop_scenario, two_condition_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trajectories", type=int, default=300, help="per condition")
    ap.add_argument("--out", default="results/two_condition")
    args = ap.parse_args()

    obstacles = loop_corridor_map()
    data = two_condition_dataset(obstacles, loop_scenario(n_trajectories=args.trajectories, seed=args.seed))
    batches = make_batches(data, BatchPlan(3600.0, 0.1, args.seed))
    t0 = time.perf_counter()
    report = run_experiment(batches, GridSpec(obstacles.width, obstacles.height))
    print(f"{len(batches)} batches, {time.perf_counter() - t0:.1f} s")

    half = len(batches) // 2
    for r in report.rows:
        print(f"{r.batch:3d} {r.variant:9s} nll={r.nll:8.3f} cells={r.cells:5d} t={r.seconds:.3f}s")
    test_b = VelocityBatch.concat([test for _, test in batches[half:]])
    for v, run in report.runs.items():
        print(f"{v:9s} aggregate {run.aggregate_nll:.3f}  condition-B final-map {map_nll(run.final_map, test_b):.3f}")
    for path in write_report(report, args.out):
        print("wrote", path)


if __name__ == "__main__":
    main()
