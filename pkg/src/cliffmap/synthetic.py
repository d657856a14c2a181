"""Synthetic inputs: MAPF obstacle maps, goal-directed random walks, the eight-direction toy.

Trajectories come from a softmax random walk over a cost-to-go field: at
each cell the walker picks a free neighbour ``v`` with probability
proportional to ``exp(-(ctg(v) + step(u, v) - ctg(u)) / tau)``. As ``tau``
goes to zero only shortest-path moves survive.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics_map import VelocityBatch
from .swgmm import wrap_angle

FREE_CHARS = set(".G")
BLOCKED_CHARS = set("@TO")
NOMINAL_SPEED = 1.2
SQRT2 = math.sqrt(2.0)
MOVES = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0), (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2)]

Cell = tuple[int, int]  # (row, col)


class MapFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObstacleGrid:
    """Occupancy of a grid; ``blocked[row, col]``. Cell ``(r, c)`` has centre ``(c + 0.5, r + 0.5)`` in metres."""

    blocked: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocked, dtype=bool)
        if b.ndim != 2 or b.size == 0:
            raise ValueError("obstacle grid must be a non-empty 2-D array")
        if b.all():
            raise ValueError("obstacle grid has no free cell")
        object.__setattr__(self, "blocked", b)

    @property
    def height(self) -> int:
        return int(self.blocked.shape[0])

    @property
    def width(self) -> int:
        return int(self.blocked.shape[1])

    def free(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and not self.blocked[r, c]

    def neighbours(self, cell: Cell, connectivity: int = 8):
        """Free neighbours with step length; diagonals may not cut blocked corners."""
        r, c = cell
        for dr, dc, cost in MOVES if connectivity == 8 else MOVES[:4]:
            nb = (r + dr, c + dc)
            if not self.free(nb):
                continue
            if dr and dc and not (self.free((r + dr, c)) and self.free((r, c + dc))):
                continue
            yield nb, cost

    def free_cells(self) -> list[Cell]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.blocked))]


def parse_mapf_map(text: str) -> ObstacleGrid:
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        key = parts[0].lower()
        if key == "map":
            break
        if key not in ("type", "height", "width") or len(parts) != 2:
            raise MapFormatError(f"malformed header line {lines[i - 1]!r}")
        header[key] = parts[1]
    else:
        raise MapFormatError("missing 'map' line")
    try:
        height, width = int(header["height"]), int(header["width"])
    except (KeyError, ValueError) as exc:
        raise MapFormatError("header needs integer height and width") from exc
    rows = [ln.rstrip("\r\n") for ln in lines[i:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != height:
        raise MapFormatError(f"header says height {height} but found {len(rows)} rows")
    blocked = np.zeros((height, width), dtype=bool)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise MapFormatError(f"row {r} has {len(row)} cells, expected {width}")
        for c, ch in enumerate(row):
            if ch in FREE_CHARS:
                continue
            if ch in BLOCKED_CHARS:
                blocked[r, c] = True
            else:
                raise MapFormatError(f"unknown terrain {ch!r} at row {r}, col {c}")
    return ObstacleGrid(blocked)


def load_mapf_map(path) -> ObstacleGrid:
    with open(path) as fh:
        return parse_mapf_map(fh.read())


def format_mapf_map(grid: ObstacleGrid) -> str:
    rows = ["".join("@" if b else "." for b in row) for row in grid.blocked]
    return "\n".join(["type octile", f"height {grid.height}", f"width {grid.width}", "map", *rows]) + "\n"


def loop_corridor_map(size: int = 48, margin: int = 4, corridor: int = 3) -> ObstacleGrid:
    """Square ring of corridors: top/bottom runs joined by left/right runs."""
    blocked = np.ones((size, size), dtype=bool)
    lo, hi = margin, size - margin
    blocked[lo : lo + corridor, lo:hi] = False
    blocked[hi - corridor : hi, lo:hi] = False
    blocked[lo:hi, lo : lo + corridor] = False
    blocked[lo:hi, hi - corridor : hi] = False
    return ObstacleGrid(blocked)


def _block(r0: int, c0: int, n: int) -> list[Cell]:
    return [(r, c) for r in range(r0, r0 + n) for c in range(c0, c0 + n)]


@dataclass(frozen=True)
class Scenario:
    """Start and goal regions; trajectory ``i`` runs from ``starts[i % k]`` to ``goals[i % k]``."""

    starts: tuple
    goals: tuple
    n_trajectories: int = 1000
    tau: float = 0.3
    seed: int = 0
    speed: float = NOMINAL_SPEED
    speed_jitter: float = 0.25
    position_noise: float = 0.1
    # each visited cell contributes a waypoint drawn uniformly within this
    # distance of its centre, so headings are not locked to the 8 grid moves
    waypoint_spread: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.waypoint_spread < 0.5:
            raise ValueError("waypoint_spread must lie in [0, 0.5)")
        if len(self.starts) != len(self.goals) or not self.starts:
            raise ValueError("need matching, non-empty start and goal region lists")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def swapped(self) -> "Scenario":
        return replace(self, starts=self.goals, goals=self.starts)


def loop_scenario(size: int = 48, margin: int = 4, corridor: int = 3, **kw) -> Scenario:
    """Condition A: clockwise along the top run, counter-clockwise along the bottom run."""
    lo, hi = margin, size - margin - corridor
    top_left, top_right = _block(lo, lo, corridor), _block(lo, hi, corridor)
    bot_left, bot_right = _block(hi, lo, corridor), _block(hi, hi, corridor)
    return Scenario(starts=(tuple(top_left), tuple(bot_right)), goals=(tuple(top_right), tuple(bot_left)), **kw)


def cost_to_go(grid: ObstacleGrid, goals: Sequence[Cell]) -> np.ndarray:
    """Uniform-cost search distances from the goal region (inf where unreachable)."""
    dist = np.full(grid.blocked.shape, np.inf)
    heap = []
    for g in goals:
        if not grid.free(g):
            raise ValueError(f"goal cell {g} is not free")
        dist[g] = 0.0
        heap.append((0.0, g))
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, c in grid.neighbours(u):
            nd = d + c
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _walk(grid, ctg, start, goal_set, tau, rng, max_steps):
    path = [start]
    u = start
    for _ in range(max_steps):
        if u in goal_set:
            return path
        nbs = list(grid.neighbours(u))
        q = np.array([ctg[v] + c - ctg[u] for v, c in nbs])
        q -= q.min()
        p = np.exp(-q / tau)
        u = nbs[rng.choice(len(nbs), p=p / p.sum())][0]
        path.append(u)
    return None


def walk_cells(grid: ObstacleGrid, start: Cell, goals: Sequence[Cell], tau: float, rng, ctg=None, retries: int = 20) -> list[Cell]:
    ctg = cost_to_go(grid, goals) if ctg is None else ctg
    if not np.isfinite(ctg[start]):
        raise ValueError(f"goal region unreachable from {start}")
    goal_set = set(goals)
    max_steps = int(4 * ctg[start]) + 50
    for _ in range(retries):
        path = _walk(grid, ctg, start, goal_set, tau, rng, max_steps)
        if path is not None:
            return path
    raise RuntimeError(f"random walk from {start} did not reach the goal in {retries} attempts")


def _resample(path: list[Cell], speed: float, noise: float, rng, spread: float = 0.0) -> np.ndarray:
    pts = np.array([(c + 0.5, r + 0.5) for r, c in path], dtype=float)
    if spread > 0:
        pts = pts + rng.uniform(-spread, spread, pts.shape)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(math.floor(arc[-1] / speed)) + 1
    s = np.arange(n) * speed
    xy = np.stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])], axis=1)
    if noise > 0:
        xy = xy + rng.normal(0.0, noise, xy.shape)
    return xy


def trajectory_velocities(xy: np.ndarray) -> np.ndarray:
    """Finite-difference (heading, speed) at 1 Hz; the first sample borrows the second's."""
    d = np.diff(xy, axis=0)
    v = np.stack([wrap_angle(np.arctan2(d[:, 1], d[:, 0])), np.hypot(d[:, 0], d[:, 1])], axis=1)
    return np.concatenate([v[:1], v], axis=0)


def sample_trajectories(grid: ObstacleGrid, scenario: Scenario, condition: str = "A") -> list[VelocityBatch]:
    """One 1 Hz :class:`VelocityBatch` per trajectory (times start at 0, person id = index)."""
    if condition not in ("A", "B"):
        raise ValueError("condition must be 'A' or 'B'")
    sc = scenario if condition == "A" else scenario.swapped()
    for region in (*sc.starts, *sc.goals):
        if not region or not all(grid.free(c) for c in region):
            raise ValueError("start/goal regions must be non-empty and free")
    ctgs = [cost_to_go(grid, list(g)) for g in sc.goals]
    ss = np.random.SeedSequence([scenario.seed, 0 if condition == "A" else 1])
    out = []
    for i, child in enumerate(ss.spawn(sc.n_trajectories)):
        rng = np.random.default_rng(child)
        k = i % len(sc.starts)
        starts = sc.starts[k]
        start = tuple(starts[rng.integers(len(starts))])
        cells = walk_cells(grid, start, list(sc.goals[k]), sc.tau, rng, ctg=ctgs[k])
        speed = float(np.clip(rng.normal(sc.speed, sc.speed_jitter), 0.3, 3.0))
        if len(cells) < 2:
            continue
        xy = _resample(cells, speed, sc.position_noise, rng, sc.waypoint_spread)
        if len(xy) < 2:
            continue
        vel = trajectory_velocities(xy)
        out.append(VelocityBatch(xy, vel, np.arange(len(xy), dtype=float), np.full(len(xy), i)))
    return out


def two_condition_dataset(
    grid: ObstacleGrid,
    scenario: Scenario,
    batches_per_condition: int = 10,
    interval: float = 3600.0,
) -> VelocityBatch:
    """Condition A then condition B, trajectories timestamped into consecutive windows.

    Trajectories of each condition are dealt into ``batches_per_condition``
    equal groups; group ``b`` of condition A starts in window ``b``, condition
    B continues from window ``batches_per_condition``.
    """
    parts = []
    for ci, cond in enumerate("AB"):
        trajs = sample_trajectories(grid, scenario, cond)
        per = int(math.ceil(len(trajs) / batches_per_condition))
        for i, tr in enumerate(trajs):
            window = ci * batches_per_condition + i // per
            offset = (i % per) * 1e-3
            pid = ci * scenario.n_trajectories + int(tr.person[0])
            parts.append(VelocityBatch(tr.positions, tr.velocities, tr.times + window * interval + offset, np.full(len(tr), pid)))
    return VelocityBatch.concat(parts)


def toy_eight_directions(
    n_per_batch: int = 200,
    speed: float = 1.0,
    sigma: float = math.radians(10.0),
    seed: int = 0,
    position: tuple[float, float] = (0.5, 0.5),
    interval: float = 3600.0,
) -> list[VelocityBatch]:
    """Eight batches at one location, batch ``k`` heading ``k * 45`` degrees (0-based)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(8):
        theta = wrap_angle(k * math.pi / 4 + rng.normal(0.0, sigma, n_per_batch))
        rho = np.maximum(rng.normal(speed, 0.1, n_per_batch), 0.0)
        times = k * interval + np.arange(n_per_batch) * (interval / n_per_batch)
        pos = np.tile(np.asarray(position, dtype=float), (n_per_batch, 1))
        out.append(VelocityBatch(pos, np.stack([theta, rho], axis=1), times, np.arange(n_per_batch) + k * n_per_batch))
    return out
