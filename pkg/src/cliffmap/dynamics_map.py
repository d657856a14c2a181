"""Grid of locations, per-cell online/batch updates, persistence and field export."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .batch import BuildConfig, build_cell, build_cells
from .online import UpdateConfig, update_cell, update_cells
from .suffstats import CellState, SufficientStats
from .swgmm import Swgmm, Velocity, mixture_density, wrap_angle

log = logging.getLogger(__name__)

MAGIC = b"CLFF"
FORMAT_VERSION = 1
FIELD_HEADER = ("x", "y", "weight", "theta", "rho", "s_tt", "s_tr", "s_rr")


class MapFormatError(ValueError):
    """Raised when a serialized map cannot be loaded."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    origin: tuple[float, float] = (0.0, 0.0)
    resolution: float = 1.0
    radius: float = 1.0

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid needs at least one cell")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def center(self, index: int) -> tuple[float, float]:
        iy, ix = divmod(int(index), self.width)
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )

    def cell_of(self, positions) -> np.ndarray:
        """Index of the containing cell for each position, -1 when outside."""
        P = np.atleast_2d(np.asarray(positions, dtype=float))
        ix = np.floor((P[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((P[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        return np.where(inside, iy * self.width + ix, -1)

    @classmethod
    def covering(cls, positions, resolution: float = 1.0, radius: float = 1.0, margin: float = 0.0) -> "GridSpec":
        P = np.atleast_2d(np.asarray(positions, dtype=float))
        lo = np.floor((P.min(axis=0) - margin) / resolution) * resolution
        hi = P.max(axis=0) + margin
        w = int(math.floor((hi[0] - lo[0]) / resolution)) + 1
        h = int(math.floor((hi[1] - lo[1]) / resolution)) + 1
        return cls(w, h, (float(lo[0]), float(lo[1])), resolution, radius)


@dataclass(frozen=True)
class PositionedVelocity:
    position: tuple[float, float]
    velocity: Velocity
    time: float = 0.0


@dataclass(frozen=True, eq=False)
class VelocityBatch:
    """Column store of positioned velocities.

    Iterating yields :class:`PositionedVelocity` records; the arrays are what
    the numerical code consumes.
    """

    positions: np.ndarray
    velocities: np.ndarray
    times: np.ndarray
    person: np.ndarray

    def __init__(self, positions=None, velocities=None, times=None, person=None):
        pos = np.zeros((0, 2)) if positions is None else np.asarray(positions, dtype=float).reshape(-1, 2)
        vel = np.zeros((0, 2)) if velocities is None else np.asarray(velocities, dtype=float).reshape(-1, 2)
        n = pos.shape[0]
        if vel.shape[0] != n:
            raise ValueError("positions and velocities differ in length")
        t = np.zeros(n) if times is None else np.asarray(times, dtype=float).reshape(-1)
        pid = np.zeros(n, dtype=np.int64) if person is None else np.asarray(person, dtype=np.int64).reshape(-1)
        if t.shape[0] != n or pid.shape[0] != n:
            raise ValueError("column lengths differ")
        vel = vel.copy()
        if n:
            vel[:, 0] = wrap_angle(vel[:, 0])
            if np.any(vel[:, 1] < 0):
                raise ValueError("negative speed in batch")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "person", pid)

    @classmethod
    def from_records(cls, records: Iterable[PositionedVelocity]) -> "VelocityBatch":
        recs = list(records)
        return cls(
            [r.position for r in recs],
            [(r.velocity.theta, r.velocity.rho) for r in recs],
            [r.time for r in recs],
        )

    @classmethod
    def concat(cls, batches: Sequence["VelocityBatch"]) -> "VelocityBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls()
        return cls(
            np.concatenate([b.positions for b in batches]),
            np.concatenate([b.velocities for b in batches]),
            np.concatenate([b.times for b in batches]),
            np.concatenate([b.person for b in batches]),
        )

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def __iter__(self) -> Iterator[PositionedVelocity]:
        for p, v, t in zip(self.positions, self.velocities, self.times):
            yield PositionedVelocity((float(p[0]), float(p[1])), Velocity(float(v[0]), float(v[1])), float(t))

    def subset(self, idx) -> "VelocityBatch":
        return VelocityBatch(self.positions[idx], self.velocities[idx], self.times[idx], self.person[idx])


BatchLike = Union[VelocityBatch, Sequence[PositionedVelocity]]


def as_batch(batch: BatchLike) -> VelocityBatch:
    if isinstance(batch, VelocityBatch):
        return batch
    return VelocityBatch.from_records(batch)


@dataclass(frozen=True, eq=False)
class CliffMap:
    grid: GridSpec
    cells: dict = field(default_factory=dict)
    iter: int = 0

    def __eq__(self, other):
        if not isinstance(other, CliffMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.iter == other.iter
            and self.cells.keys() == other.cells.keys()
            and all(self.cells[k] == other.cells[k] for k in self.cells)
        )

    def model_at(self, x: float, y: float) -> Optional[Swgmm]:
        idx = int(self.grid.cell_of([(x, y)])[0])
        cell = self.cells.get(idx)
        return None if cell is None else cell.model


def _neighbour_offsets(grid: GridSpec) -> np.ndarray:
    k = int(math.ceil(grid.radius / grid.resolution)) + 1
    r = np.arange(-k, k + 1)
    dx, dy = np.meshgrid(r, r)
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


def assign_many(grid: GridSpec, positions) -> tuple[np.ndarray, np.ndarray, int]:
    """Pair observations with every cell whose centre lies within ``grid.radius``.

    Returns ``(obs_index, cell_index, dropped)`` where ``dropped`` counts
    positions outside the grid.
    """
    P = np.asarray(positions, dtype=float).reshape(-1, 2)
    if P.shape[0] == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), 0
    ox, oy = grid.origin
    fx = (P[:, 0] - ox) / grid.resolution
    fy = (P[:, 1] - oy) / grid.resolution
    inside = (fx >= 0) & (fx < grid.width) & (fy >= 0) & (fy < grid.height)
    base_x = np.floor(fx).astype(np.int64)
    base_y = np.floor(fy).astype(np.int64)
    r2 = grid.radius**2 * (1.0 + 1e-12)
    obs_parts, cell_parts = [], []
    for dx, dy in _neighbour_offsets(grid):
        cx = base_x + dx
        cy = base_y + dy
        ok = inside & (cx >= 0) & (cx < grid.width) & (cy >= 0) & (cy < grid.height)
        d2 = (ox + (cx + 0.5) * grid.resolution - P[:, 0]) ** 2 + (oy + (cy + 0.5) * grid.resolution - P[:, 1]) ** 2
        ok &= d2 <= r2
        sel = np.flatnonzero(ok)
        obs_parts.append(sel)
        cell_parts.append(cy[sel] * grid.width + cx[sel])
    obs_idx = np.concatenate(obs_parts)
    cell_idx = np.concatenate(cell_parts)
    order = np.lexsort((obs_idx, cell_idx))
    return obs_idx[order], cell_idx[order], int(np.count_nonzero(~inside))


def assign(grid: GridSpec, p: PositionedVelocity) -> list[int]:
    _, cells, _ = assign_many(grid, [p.position])
    return sorted(int(c) for c in cells)


def group_by_cell(grid: GridSpec, batch: VelocityBatch) -> tuple[dict[int, np.ndarray], int]:
    """Velocities per touched cell (observation order preserved) and the drop count."""
    obs_idx, cell_idx, dropped = assign_many(grid, batch.positions)
    groups: dict[int, np.ndarray] = {}
    if obs_idx.size:
        bounds = np.flatnonzero(np.diff(cell_idx)) + 1
        for chunk_obs, chunk_cell in zip(np.split(obs_idx, bounds), np.split(cell_idx, bounds)):
            groups[int(chunk_cell[0])] = batch.velocities[chunk_obs]
    return groups, dropped


def update_map(
    cmap: CliffMap,
    batch: BatchLike,
    cfg: UpdateConfig = UpdateConfig(),
    build: BuildConfig = BuildConfig(),
    workers: int = 1,
) -> CliffMap:
    """One iteration of the whole-map loop; returns a new map.

    Cells without a model are built from their share of the batch, existing
    cells get an online update. A failing cell is logged and left as it was.
    """
    batch = as_batch(batch)
    k = cmap.iter + 1
    groups, dropped = group_by_cell(cmap.grid, batch)
    if dropped:
        log.info("iteration %d: %d observations outside the grid", k, dropped)

    def work(item):
        idx, X = item
        try:
            prev = cmap.cells.get(idx)
            if prev is None:
                return idx, build_cell(X, build, iteration=k)
            return idx, update_cell(prev, X, k, cfg)
        except Exception as exc:  # noqa: BLE001 - one bad cell must not abort the map
            log.warning("iteration %d: cell %d skipped: %s", k, idx, exc)
            return idx, None

    items = sorted(groups.items())
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, items))
    else:
        fresh = [it for it in items if it[0] not in cmap.cells]
        known = [it for it in items if it[0] in cmap.cells]
        built = build_cells([X for _, X in fresh], build, iteration=k)
        updated = update_cells([cmap.cells[i] for i, _ in known], [X for _, X in known], k, cfg)
        results = []
        for (idx, _), state in zip(fresh + known, built + updated):
            if isinstance(state, Exception):
                log.warning("iteration %d: cell %d skipped: %s", k, idx, state)
                state = None
            results.append((idx, state))
    cells = dict(cmap.cells)
    for idx, state in results:
        if state is not None:
            cells[idx] = state
    return CliffMap(cmap.grid, cells, k)


def build_map(grid: GridSpec, batch: BatchLike, build: BuildConfig = BuildConfig(), iteration: int = 1) -> CliffMap:
    """Batch map from scratch: every touched cell goes through the build path."""
    return update_map(CliffMap(grid, {}, iteration - 1), batch, build=build)


def cell_densities(cmap: CliffMap, batch: BatchLike) -> np.ndarray:
    """Mixture density of each observation at its containing cell; NaN where unmodelled."""
    batch = as_batch(batch)
    out = np.full(len(batch), np.nan)
    if not len(batch):
        return out
    idx = cmap.grid.cell_of(batch.positions)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    bounds = np.flatnonzero(np.diff(sorted_idx)) + 1
    for chunk in np.split(order, bounds):
        cell = cmap.cells.get(int(idx[chunk[0]]))
        if cell is not None and idx[chunk[0]] >= 0:
            out[chunk] = mixture_density(cell.model, batch.velocities[chunk])
    return out


# -- persistence ---------------------------------------------------------------

_HEADER = struct.Struct("<4sH")
_GRID = struct.Struct("<dddIId")
_COUNTS = struct.Struct("<QI")
_CELL = struct.Struct("<QIdQ")
_ROW = struct.Struct("<6d")


def serialize(cmap: CliffMap) -> bytes:
    g = cmap.grid
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
    out.write(_GRID.pack(g.origin[0], g.origin[1], g.resolution, g.width, g.height, g.radius))
    out.write(_COUNTS.pack(cmap.iter, len(cmap.cells)))
    for idx in sorted(cmap.cells):
        cell = cmap.cells[idx]
        m, s = cell.model, cell.stats
        out.write(_CELL.pack(idx, m.n_components, cell.n_ind, cell.last_update_iter))
        for j in range(m.n_components):
            out.write(_ROW.pack(m.weights[j], m.means[j, 0], m.means[j, 1], m.covs[j, 0, 0], m.covs[j, 0, 1], m.covs[j, 1, 1]))
        for j in range(m.n_components):
            out.write(_ROW.pack(s.s1[j], s.s2[j, 0], s.s2[j, 1], s.s3[j, 0, 0], s.s3[j, 0, 1], s.s3[j, 1, 1]))
    return out.getvalue()


def deserialize(data: bytes) -> CliffMap:
    view = memoryview(data)
    pos = 0

    def take(st: struct.Struct, what: str):
        nonlocal pos
        if pos + st.size > len(view):
            raise MapFormatError(f"truncated map file while reading {what}")
        vals = st.unpack_from(view, pos)
        pos += st.size
        return vals

    magic, version = take(_HEADER, "header")
    if magic != MAGIC:
        raise MapFormatError(f"not a map file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise MapFormatError(f"unsupported map format version {version}, expected {FORMAT_VERSION}")
    ox, oy, res, w, h, radius = take(_GRID, "grid")
    try:
        grid = GridSpec(w, h, (ox, oy), res, radius)
    except ValueError as exc:
        raise MapFormatError(f"invalid grid: {exc}") from exc
    iteration, n_cells = take(_COUNTS, "cell count")
    cells = {}
    for _ in range(n_cells):
        idx, J, n_ind, last = take(_CELL, "cell record")
        rows = np.array([take(_ROW, f"cell {idx} component") for _ in range(J)]).reshape(J, 6)
        srows = np.array([take(_ROW, f"cell {idx} statistics") for _ in range(J)]).reshape(J, 6)
        if idx >= grid.n_cells:
            raise MapFormatError(f"cell {idx}: index outside the {w}x{h} grid")
        try:
            covs = np.stack([rows[:, [3, 4]], rows[:, [4, 5]]], axis=1)
            model = Swgmm(rows[:, 0], rows[:, 1:3], covs)
            s3 = np.stack([srows[:, [3, 4]], srows[:, [4, 5]]], axis=1)
            stats = SufficientStats(srows[:, 0], srows[:, 1:3], s3)
            cells[int(idx)] = CellState(model, stats, n_ind, int(last))
        except ValueError as exc:
            raise MapFormatError(f"cell {idx}: {exc}") from exc
    if pos != len(view):
        raise MapFormatError(f"{len(view) - pos} trailing bytes after last cell")
    return CliffMap(grid, cells, int(iteration))


def save_map(cmap: CliffMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(cmap))


def load_map(path) -> CliffMap:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# -- export --------------------------------------------------------------------


def export_field(cmap: CliffMap, mode: str = "all_components") -> list[dict]:
    """One record per (cell, component), or per cell with ``mode='dominant'``."""
    if mode not in ("all_components", "all", "dominant"):
        raise ValueError(f"unknown export mode {mode!r}")
    records = []
    for idx in sorted(cmap.cells):
        m = cmap.cells[idx].model
        x, y = cmap.grid.center(idx)
        comps = [m.dominant()] if mode == "dominant" else range(m.n_components)
        for j in comps:
            records.append(
                dict(
                    x=x,
                    y=y,
                    weight=float(m.weights[j]),
                    theta=float(m.means[j, 0]),
                    rho=float(m.means[j, 1]),
                    s_tt=float(m.covs[j, 0, 0]),
                    s_tr=float(m.covs[j, 0, 1]),
                    s_rr=float(m.covs[j, 1, 1]),
                )
            )
    return records


def write_field_csv(records: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIELD_HEADER)
        for r in records:
            writer.writerow([repr(r[k]) for k in FIELD_HEADER])
