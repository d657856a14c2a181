"""Flow-aware A* over an obstacle grid, with edge costs read from a CliffMap."""

from __future__ import annotations

import csv
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics_map import CliffMap
from .swgmm import LIKELIHOOD_FLOOR, mixture_density, wrap_pi
from .synthetic import Cell, ObstacleGrid

PATH_HEADER = ("step", "x", "y", "heading")


@dataclass(frozen=True)
class PlannerConfig:
    alpha: float = 0.5
    nominal_speed: float = 1.2
    flow_cost_cap: float = -math.log(LIKELIHOOD_FLOOR)
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.nominal_speed >= 0.0:
            raise ValueError("nominal_speed must be non-negative")
        if not self.flow_cost_cap > 0.0:
            raise ValueError("flow_cost_cap must be positive")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class Plan:
    """Planner result; ``found`` is False (empty path, infinite cost) when the goal is unreachable."""

    path: tuple[Cell, ...] = ()
    cost: float = math.inf

    @property
    def found(self) -> bool:
        return bool(self.path)


NO_PATH = Plan()


def cell_center(cell: Cell) -> tuple[float, float]:
    """World ``(x, y)`` of an obstacle-grid cell ``(row, col)`` with 1 m cells at the origin."""
    r, c = cell
    return c + 0.5, r + 0.5


def cell_at(x: float, y: float) -> Cell:
    return int(math.floor(y)), int(math.floor(x))


def edge_heading(u: Cell, v: Cell) -> float:
    (xu, yu), (xv, yv) = cell_center(u), cell_center(v)
    return math.atan2(yv - yu, xv - xu) % (2.0 * math.pi)


class FlowCost:
    """Per-metre flow cost of entering a cell with a given heading, cached.

    The capped NLL is clamped below at zero: mixture densities above 1 would
    otherwise yield negative edge costs.
    """

    def __init__(self, cmap: Optional[CliffMap], cfg: PlannerConfig):
        self.cmap = cmap
        self.cfg = cfg
        self._cache: dict[tuple[Cell, float], float] = {}

    def model(self, cell: Cell):
        return None if self.cmap is None else self.cmap.model_at(*cell_center(cell))

    def __call__(self, cell: Cell, heading: float) -> float:
        key = (cell, heading)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        cap = self.cfg.flow_cost_cap
        model = self.model(cell)
        if model is None:
            val = 1.0
        else:
            p = float(mixture_density(model, np.array([[heading, self.cfg.nominal_speed]]))[0])
            nll = -math.log(max(p, LIKELIHOOD_FLOOR))
            val = min(max(nll, 0.0), cap) / cap
        self._cache[key] = val
        return val


def edge_cost(u: Cell, v: Cell, flow: FlowCost) -> float:
    a = flow.cfg.alpha
    dist = math.hypot(v[0] - u[0], v[1] - u[1])
    return a * dist + (1.0 - a) * flow(v, edge_heading(u, v)) * dist


def path_cost(path: Sequence[Cell], cmap: Optional[CliffMap], cfg: PlannerConfig = PlannerConfig()) -> float:
    flow = FlowCost(cmap, cfg)
    return sum(edge_cost(u, v, flow) for u, v in zip(path, path[1:]))


def plan(grid: ObstacleGrid, cmap: Optional[CliffMap], start: Cell, goal: Cell, cfg: PlannerConfig = PlannerConfig()) -> Plan:
    """Cost-optimal path from ``start`` to ``goal`` (cells as ``(row, col)``)."""
    start, goal = tuple(start), tuple(goal)
    for name, c in (("start", start), ("goal", goal)):
        if not grid.free(c):
            raise ValueError(f"{name} {c} is not a free cell")
    flow = FlowCost(cmap, cfg)
    a = cfg.alpha

    def h(c: Cell) -> float:
        return a * math.hypot(goal[0] - c[0], goal[1] - c[1])

    tie = itertools.count()
    best = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    heap = [(h(start), next(tie), 0.0, start)]
    closed = set()
    while heap:
        _, _, g, u = heapq.heappop(heap)
        if u in closed:
            continue
        if u == goal:
            path = [u]
            while path[-1] != start:
                path.append(parent[path[-1]])
            return Plan(tuple(reversed(path)), g)
        closed.add(u)
        for v, _ in grid.neighbours(u, cfg.connectivity):
            if v in closed:
                continue
            nv = g + edge_cost(u, v, flow)
            if nv < best.get(v, math.inf):
                best[v] = nv
                parent[v] = u
                heapq.heappush(heap, (nv + h(v), next(tie), nv, v))
    return NO_PATH


def path_flow_alignment(path: Sequence[Cell], cmap: CliffMap) -> float:
    """Mean absolute angle between each edge and the dominant flow of the cell it enters.

    Edges into cells without a model are skipped; NaN if no edge is scored.
    """
    flow = FlowCost(cmap, PlannerConfig())
    devs = []
    for u, v in zip(path, path[1:]):
        model = flow.model(v)
        if model is None:
            continue
        mu = float(model.means[model.dominant(), 0])
        devs.append(abs(wrap_pi(edge_heading(u, v) - mu)))
    return float(np.mean(devs)) if devs else math.nan


def path_rows(path: Sequence[Cell]) -> list[tuple[int, float, float, float]]:
    """``(step, x, y, heading)`` rows; heading is that of the outgoing edge (last repeats the previous)."""
    rows = []
    for i, c in enumerate(path):
        x, y = cell_center(c)
        if len(path) < 2:
            hd = 0.0
        elif i + 1 < len(path):
            hd = edge_heading(c, path[i + 1])
        else:
            hd = edge_heading(path[i - 1], c)
        rows.append((i, x, y, hd))
    return rows


def write_path_csv(result: Plan, cmap: Optional[CliffMap], out) -> None:
    """Path rows, then a ``# total_cost=... alignment=...`` summary line."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PATH_HEADER)
    for step, x, y, hd in path_rows(result.path):
        w.writerow([step, repr(x), repr(y), repr(hd)])
    align = path_flow_alignment(result.path, cmap) if (cmap is not None and result.found) else math.nan
    out.write(f"# total_cost={result.cost!r} alignment={align!r}\n")
