"""Stochastic-EM update of a location's mixture from a new observation batch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batch import EmConfig, MeanShiftConfig, em_fit, em_fit_many, mean_shift_many, mean_shift_modes
from .suffstats import (
    PRUNE_BELOW,
    CellState,
    StatsCollapsed,
    SufficientStats,
    batch_stats,
    grouped_e_step,
    grouped_m_step,
    m_step,
    pad_models,
    pad_stats,
    responsibilities,
    stats_from_responsibilities,
    unpack_group,
)
from .swgmm import JITTER, Swgmm, as_observations, component_densities

__all__ = [
    "CellState",
    "StatsCollapsed",
    "SufficientStats",
    "UpdateConfig",
    "batch_stats",
    "m_step",
    "poorly_fit",
    "responsibilities",
    "se_step",
    "spawn_components",
    "spawn_triggered",
    "stepsize",
    "update_cell",
    "update_cells",
]


@dataclass(frozen=True)
class UpdateConfig:
    """Online update settings.

    ``eta_thres`` is compared against the batch's mean mixture density to
    decide whether to add components, and against each observation's best
    single-component density to pick the observations new components are
    built from.
    """

    decay_lambda: float = 0.5
    eta_thres: float = 0.1
    spawn_ms_cfg: MeanShiftConfig = field(default_factory=MeanShiftConfig)
    spawn_em_cfg: EmConfig = field(default_factory=EmConfig)
    prune_below: float = PRUNE_BELOW
    jitter: float = JITTER

    def __post_init__(self):
        if not 0.0 < self.decay_lambda < 1.0:
            raise ValueError("decay_lambda must lie in (0, 1)")
        if not self.eta_thres > 0:
            raise ValueError("eta_thres must be positive")


def stepsize(n_k: int, n_ind_prev: float, lam: float) -> tuple[float, float]:
    """Return ``(gamma, n_ind_new)`` with ``n_ind_new = lam * n_ind_prev + n_k``."""
    if n_k < 1:
        raise ValueError("stepsize undefined for an empty batch; skip the update")
    if not n_ind_prev > 0:
        raise ValueError("n_ind_prev must be positive")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    n_ind_new = lam * n_ind_prev + n_k
    return n_k / n_ind_new, n_ind_new


def se_step(prev: SufficientStats, batch: SufficientStats, gamma: float) -> SufficientStats:
    if len(prev) != len(batch):
        raise ValueError(f"statistics misaligned: {len(prev)} stored rows vs {len(batch)} batch rows")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if gamma == 1.0:
        return batch
    return SufficientStats(
        prev.s1 + gamma * (batch.s1 - prev.s1),
        prev.s2 + gamma * (batch.s2 - prev.s2),
        prev.s3 + gamma * (batch.s3 - prev.s3),
    )


def spawn_triggered(model: Swgmm, obs, eta_thres: float) -> bool:
    """True when the batch's mean (unnormalized) mixture density is below ``eta_thres``."""
    r = responsibilities(model, obs)
    return bool(np.mean(r.density) < eta_thres)


def poorly_fit(model: Swgmm, obs, cutoff: float) -> np.ndarray:
    """Mask of observations whose best single-component density is below ``cutoff``."""
    X = as_observations(obs)
    return component_densities(model, X).max(axis=1) < cutoff


def spawn_components(cell: CellState, obs, gamma: float, cfg: UpdateConfig = UpdateConfig()) -> CellState:
    """Append components fitted to the poorly explained part of ``obs``.

    New components share weight mass ``gamma`` in proportion to their fitted
    weights; existing weights and statistics are scaled by ``1 - gamma``.
    Returns ``cell`` unchanged when nothing is poorly fit.
    """
    X = as_observations(obs)
    poor = poorly_fit(cell.model, X, cfg.eta_thres)
    if not np.any(poor):
        return cell
    Y = X[poor]
    seeds = mean_shift_modes(Y, cfg.spawn_ms_cfg)
    fresh, _ = em_fit(Y, seeds, cfg.spawn_em_cfg, init_cov=cfg.spawn_ms_cfg.initial_cov)
    return _combine(cell, fresh, gamma, cfg)


def update_cell(cell: CellState, obs, iteration: int, cfg: UpdateConfig = UpdateConfig()) -> CellState:
    """One online iteration for a location that already has a model."""
    X = as_observations(obs)
    if X.shape[0] == 0:
        return cell
    gamma, n_ind = stepsize(X.shape[0], cell.n_ind, cfg.decay_lambda)
    r = responsibilities(cell.model, X)
    if np.mean(r.density) < cfg.eta_thres:
        grown = spawn_components(cell, X, gamma, cfg)
        if grown is not cell:
            cell = grown
            r = responsibilities(cell.model, X)
    S = stats_from_responsibilities(cell.model, X, r)
    s_hat = se_step(cell.stats, S, gamma)
    model, s_hat = m_step(s_hat, prune_below=cfg.prune_below, jitter=cfg.jitter)
    return CellState(model, s_hat, n_ind, iteration)


def _combine(cell: CellState, fresh: Swgmm, gamma: float, cfg: UpdateConfig) -> CellState:
    old = cell.model
    weights = np.concatenate([(1.0 - gamma) * old.weights, gamma * fresh.weights])
    total = weights.sum()
    model = Swgmm(
        weights / total,
        np.concatenate([old.means, fresh.means]),
        np.concatenate([old.covs, fresh.covs]),
        jitter=cfg.jitter,
    )
    stats = cell.stats.scaled(1.0 - gamma).concat(SufficientStats.from_model(fresh).scaled(gamma))
    return CellState(model, stats.scaled(1.0 / total), cell.n_ind, cell.last_update_iter)


def _grouped(cells: list[CellState], Xs: list[np.ndarray]):
    W, M, C, real = pad_models([c.model for c in cells])
    counts = np.array([x.shape[0] for x in Xs])
    gid = np.repeat(np.arange(len(cells)), counts)
    return grouped_e_step(np.concatenate(Xs), gid, counts, W, M, C, real), real, gid


def update_cells(cells: list[CellState], batches: list, iteration: int, cfg: UpdateConfig = UpdateConfig()) -> list:
    """:func:`update_cell` for many locations, vectorized across them.

    Entries of the result are :class:`CellState`, or the exception the
    single-location update would have raised.
    """
    out: list = [None] * len(cells)
    Xs = [as_observations(b) for b in batches]
    for k, x in enumerate(Xs):
        if x.shape[0] == 0:
            out[k] = cells[k]
    act = [k for k, x in enumerate(Xs) if x.shape[0]]
    if not act:
        return out
    cur = [cells[k] for k in act]
    X_act = [Xs[k] for k in act]
    steps = [stepsize(x.shape[0], c.n_ind, cfg.decay_lambda) for x, c in zip(X_act, cur)]
    gamma = np.array([g for g, _ in steps])
    n_ind = np.array([n for _, n in steps])
    counts = np.array([x.shape[0] for x in X_act])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    e, real, gid = _grouped(cur, X_act)
    mean_density = np.add.reduceat(e.density, starts) / counts
    spawn = np.flatnonzero(mean_density < cfg.eta_thres)
    if spawn.size:
        best = np.where(real[gid], e.comp_density, -np.inf).max(axis=1)
        poor = best < cfg.eta_thres
        grow = [i for i in spawn if np.any(poor[starts[i] : starts[i] + counts[i]])]
        Ys = [X_act[i][poor[starts[i] : starts[i] + counts[i]]] for i in grow]
        if grow:
            seeds = mean_shift_many(Ys, cfg.spawn_ms_cfg)
            fits = em_fit_many(Ys, seeds, cfg.spawn_em_cfg, init_cov=cfg.spawn_ms_cfg.initial_cov)
            for i, fit in zip(grow, fits):
                if isinstance(fit, Exception):
                    out[act[i]] = fit
                    continue
                cur[i] = _combine(cur[i], fit[0], gamma[i], cfg)
            e, real, gid = _grouped(cur, X_act)

    P1, P2, P3 = pad_stats([c.stats for c in cur], real.shape[1])
    g1, g2, g3 = gamma[:, None], gamma[:, None, None], gamma[:, None, None, None]
    full = gamma == 1.0
    s1 = np.where(full[:, None], e.s1, P1 + g1 * (e.s1 - P1))
    s2 = np.where(full[:, None, None], e.s2, P2 + g2 * (e.s2 - P2))
    s3 = np.where(full[:, None, None, None], e.s3, P3 + g3 * (e.s3 - P3))
    m = grouped_m_step(s1, s2, s3, real, cfg.prune_below, cfg.jitter)
    for i, k in enumerate(act):
        if out[k] is not None:
            continue
        if m.collapsed[i]:
            out[k] = StatsCollapsed("statistics collapsed")
            continue
        model, stats = unpack_group(m, i)
        out[k] = CellState(model, stats, float(n_ind[i]), iteration)
    return out
