"""Online / history / interval comparison: per-batch NLL, timing, coverage and decay sweeps."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .batch import BuildConfig
from .dynamics_map import CliffMap, GridSpec, VelocityBatch, build_map, cell_densities, update_map
from .online import UpdateConfig
from .swgmm import LIKELIHOOD_FLOOR

VARIANTS = ("online", "history", "interval")
REPORT_HEADER = ("batch", "variant", "nll", "cells", "misses")
TIMING_HEADER = ("batch", "variant", "seconds")

Batches = Sequence[tuple[VelocityBatch, VelocityBatch]]


@dataclass(frozen=True)
class VariantSpec:
    kind: str = "online"
    update: UpdateConfig = field(default_factory=UpdateConfig)
    build: BuildConfig = field(default_factory=BuildConfig)

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}")


@dataclass(frozen=True)
class BatchResult:
    batch: int
    variant: str
    nll: float
    seconds: float
    cells: int
    misses: int
    n_test: int
    nll_sum: float


@dataclass
class VariantRun:
    spec: VariantSpec
    rows: list[BatchResult]
    final_map: Optional[CliffMap]
    snapshots: dict[int, CliffMap] = field(default_factory=dict)

    @property
    def aggregate_nll(self) -> float:
        n = sum(r.n_test for r in self.rows)
        return sum(r.nll_sum for r in self.rows) / n if n else math.nan


def nll_terms(cmap: Optional[CliffMap], test: VelocityBatch, floor: float = LIKELIHOOD_FLOOR) -> tuple[np.ndarray, int]:
    """Per-point NLL of ``test`` under ``cmap`` and the number of unmodelled points.

    A point is scored by the model of the cell containing it; points in cells
    without a model (or outside the grid) get likelihood ``floor``.
    """
    if len(test) == 0:
        return np.zeros(0), 0
    if cmap is None:
        p = np.full(len(test), np.nan)
    else:
        p = cell_densities(cmap, test)
    missing = np.isnan(p)
    p = np.where(missing, floor, p)
    return -np.log(np.maximum(p, floor)), int(np.count_nonzero(missing))


def map_nll(cmap: Optional[CliffMap], test: VelocityBatch, floor: float = LIKELIHOOD_FLOOR) -> float:
    terms, _ = nll_terms(cmap, test, floor)
    return float(terms.mean()) if terms.size else math.nan


def run_variant(
    batches: Batches,
    spec: VariantSpec,
    grid: GridSpec,
    snapshots: Iterable[int] = (),
    floor: float = LIKELIHOOD_FLOOR,
    timing: bool = True,
) -> VariantRun:
    """Feed ``batches`` (1-based indices) through one variant.

    Only model construction or update is timed. ``snapshots`` lists batch
    indices whose maps are kept.
    """
    if not batches:
        raise ValueError("need at least one batch")
    keep = set(snapshots)
    rows = []
    cmap = CliffMap(grid)
    history: list[VelocityBatch] = []
    kept = {}
    for k, (train, test) in enumerate(batches, start=1):
        history.append(train)
        t0 = time.perf_counter()
        if spec.kind == "online":
            cmap = update_map(cmap, train, spec.update, spec.build)
        elif spec.kind == "history":
            cmap = build_map(grid, VelocityBatch.concat(history), spec.build, iteration=k)
        else:
            cmap = build_map(grid, train, spec.build, iteration=k)
        seconds = time.perf_counter() - t0 if timing else 0.0
        terms, misses = nll_terms(cmap, test, floor)
        nll = float(terms.mean()) if terms.size else math.nan
        rows.append(BatchResult(k, spec.kind, nll, seconds, len(cmap.cells), misses, int(terms.size), float(terms.sum())))
        if k in keep:
            kept[k] = cmap
    return VariantRun(spec, rows, cmap, kept)


@dataclass
class ExperimentReport:
    runs: dict[str, VariantRun]

    @property
    def rows(self) -> list[BatchResult]:
        n = len(next(iter(self.runs.values())).rows)
        return [self.runs[v].rows[i] for i in range(n) for v in self.runs]

    def aggregate(self) -> dict[str, float]:
        return {v: run.aggregate_nll for v, run in self.runs.items()}

    def final(self) -> dict[str, float]:
        return {v: run.rows[-1].nll for v, run in self.runs.items()}


def run_experiment(
    batches: Batches,
    grid: GridSpec,
    variants: Sequence[str] = VARIANTS,
    update: UpdateConfig = UpdateConfig(),
    build: BuildConfig = BuildConfig(),
    timing: bool = True,
    snapshots: Iterable[int] = (),
) -> ExperimentReport:
    snaps = tuple(snapshots)
    runs = {}
    for v in variants:
        runs[v] = run_variant(batches, VariantSpec(v, update, build), grid, snaps, timing=timing)
    return ExperimentReport(runs)


def decay_sweep(
    batches: Batches,
    lambdas: Sequence[float],
    grid: GridSpec,
    update: UpdateConfig = UpdateConfig(),
    build: BuildConfig = BuildConfig(),
    snapshots: Iterable[int] = (),
) -> dict[float, VariantRun]:
    """Online variant once per decay rate."""
    snaps = tuple(snapshots)
    return {
        lam: run_variant(batches, VariantSpec("online", replace(update, decay_lambda=lam), build), grid, snaps)
        for lam in lambdas
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(report: ExperimentReport, directory, timing: bool = True) -> list[Path]:
    """Write ``per_batch.csv``, ``summary.csv`` and, with ``timing``, ``timing.csv``.

    Wall-clock seconds live only in ``timing.csv`` so the other two files are
    byte-reproducible for a given seed.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    per_batch = d / "per_batch.csv"
    with open(per_batch, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            w.writerow([r.batch, r.variant, _fmt(r.nll), r.cells, r.misses])
    summary = d / "summary.csv"
    variants = list(report.runs)
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *variants])
        agg, fin = report.aggregate(), report.final()
        w.writerow(["average_nll", *(_fmt(agg[v]) for v in variants)])
        w.writerow(["final_batch_nll", *(_fmt(fin[v]) for v in variants)])
    written = [per_batch, summary]
    if timing:
        path = d / "timing.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_HEADER)
            for r in report.rows:
                w.writerow([r.batch, r.variant, _fmt(r.seconds)])
        written.append(path)
    return written


report = write_report
