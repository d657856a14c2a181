"""Trajectory files to positioned velocities, time batches and train/test splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from itertools import groupby
from typing import Optional

import numpy as np

from .dynamics_map import VelocityBatch
from .swgmm import wrap_angle

log = logging.getLogger(__name__)

NATIVE_HEADER = ("time", "person_id", "x", "y", "theta", "rho")
STATIONARY_SPEED = 0.05


class DataError(ValueError):
    """Input data could not be read or held no usable rows."""


@dataclass(frozen=True)
class TrackPoint:
    time: float
    person_id: int
    x: float
    y: float
    speed: Optional[float] = None
    heading: Optional[float] = None


class TrackList(list):
    """List of track points that remembers how many input rows were rejected."""

    skipped: int = 0


@dataclass(frozen=True)
class BatchPlan:
    interval: float = 3600.0
    test_fraction: float = 0.10
    seed: int = 0
    start: Optional[float] = None

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


def _sniff(first_line: str) -> str:
    return ";" if first_line.count(";") > first_line.count(",") else ","


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _opt(s: str) -> Optional[float]:
    s = s.strip()
    if s == "" or s.lower() == "nan":
        return None
    return float(s)


def _atc_row(row: list[str]) -> TrackPoint:
    # time, id, x[mm], y[mm], z[mm], speed[mm/s], motion angle[rad], facing angle[rad]
    speed = _opt(row[5]) if len(row) > 5 else None
    heading = _opt(row[6]) if len(row) > 6 else None
    return TrackPoint(
        float(row[0]),
        int(float(row[1])),
        float(row[2]) * 1e-3,
        float(row[3]) * 1e-3,
        None if speed is None else speed * 1e-3,
        heading,
    )


def _native_row(row: list[str]) -> TrackPoint:
    theta = _opt(row[4]) if len(row) > 4 else None
    rho = _opt(row[5]) if len(row) > 5 else None
    return TrackPoint(float(row[0]), int(float(row[1])), float(row[2]), float(row[3]), rho, theta)


def parse_tracks(path, fmt: str = "native_csv") -> TrackList:
    """Read ``atc_csv`` or ``native_csv`` rows; malformed rows are skipped and counted."""
    parsers = {"atc_csv": (_atc_row, 4), "native_csv": (_native_row, 4)}
    if fmt not in parsers:
        raise ValueError(f"unknown track format {fmt!r}")
    parse, min_cols = parsers[fmt]
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = TrackList()
    if not lines:
        raise DataError(f"{path}: no valid rows")
    reader = csv.reader(lines, delimiter=_sniff(lines[0]))
    skipped = 0
    for n, row in enumerate(reader):
        row = [c.strip() for c in row]
        if n == 0 and row and not _is_number(row[0]):
            continue  # header
        try:
            if len(row) < min_cols:
                raise ValueError("too few columns")
            tp = parse(row)
            if not all(math.isfinite(v) for v in (tp.time, tp.x, tp.y)):
                raise ValueError("non-finite field")
        except (ValueError, IndexError):
            skipped += 1
            continue
        out.append(tp)
    out.skipped = skipped
    if skipped:
        log.info("%s: skipped %d malformed rows", path, skipped)
    if not out:
        raise DataError(f"{path}: no valid rows")
    return out


def write_native_csv(batch: VelocityBatch, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NATIVE_HEADER)
        for p, v, t, pid in zip(batch.positions, batch.velocities, batch.times, batch.person):
            w.writerow([repr(float(t)), int(pid), repr(float(p[0])), repr(float(p[1])), repr(float(v[0])), repr(float(v[1]))])


def to_velocities(tracks, rate_hz: float = 1.0, min_speed: float = STATIONARY_SPEED) -> VelocityBatch:
    """Downsample each person's track to ``rate_hz`` and attach a velocity to each kept point.

    Dataset speed/heading are used when both are present; otherwise velocity is
    the finite difference from the previously kept point. Points slower than
    ``min_speed`` are dropped, as are points with no way to get a velocity.
    """
    if not rate_hz > 0:
        raise ValueError("rate_hz must be positive")
    min_dt = 1.0 / rate_hz
    pos, vel, times, pids = [], [], [], []
    dropped = 0
    ordered = sorted(tracks, key=lambda tp: (tp.person_id, tp.time))
    for pid, pts in groupby(ordered, key=lambda tp: tp.person_id):
        kept = []
        for tp in pts:
            if kept and tp.time - kept[-1].time < min_dt - 1e-9:
                continue
            kept.append(tp)
        prev = None
        for tp in kept:
            if tp.speed is not None and tp.heading is not None:
                theta, rho = tp.heading, tp.speed
            elif prev is not None:
                dt = tp.time - prev.time
                dx, dy = tp.x - prev.x, tp.y - prev.y
                theta, rho = math.atan2(dy, dx), math.hypot(dx, dy) / dt
            else:
                theta = rho = None
            prev = tp
            if rho is None:
                dropped += 1
                continue
            if rho < min_speed:
                continue
            pos.append((tp.x, tp.y))
            vel.append((theta, rho))
            times.append(tp.time)
            pids.append(pid)
    if dropped:
        log.info("dropped %d points without a usable velocity", dropped)
    vel_arr = np.array(vel, dtype=float).reshape(-1, 2)
    if vel_arr.size:
        vel_arr[:, 0] = wrap_angle(vel_arr[:, 0])
    return VelocityBatch(np.array(pos, dtype=float).reshape(-1, 2), vel_arr, np.array(times, dtype=float), np.array(pids, dtype=np.int64))


def split_test(batch: VelocityBatch, fraction: float, rng: np.random.Generator) -> tuple[VelocityBatch, VelocityBatch]:
    n = len(batch)
    n_test = int(math.floor(fraction * n))
    perm = rng.permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return batch.subset(train_idx), batch.subset(test_idx)


def make_batches(velocities: VelocityBatch, plan: BatchPlan = BatchPlan()) -> list[tuple[VelocityBatch, VelocityBatch]]:
    """Bucket by time window and split each bucket into (train, test).

    Empty windows between the first and last observation yield empty pairs so
    that iteration indices stay aligned with wall-clock windows.
    """
    if len(velocities) == 0:
        return []
    t0 = float(velocities.times.min()) if plan.start is None else plan.start
    bucket = np.floor((velocities.times - t0) / plan.interval).astype(np.int64)
    if np.any(bucket < 0):
        raise ValueError("observations precede the plan start")
    out = []
    for k in range(int(bucket.max()) + 1):
        sub = velocities.subset(np.flatnonzero(bucket == k))
        rng = np.random.default_rng([plan.seed, k])
        out.append(split_test(sub, plan.test_fraction, rng))
    return out
