"""Building a mixture from scratch at one location: mean shift for seeds, then EM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .suffstats import (
    CellState,
    StatsCollapsed,
    SufficientStats,
    batch_stats,
    grouped_e_step,
    grouped_m_step,
    m_step,
    responsibilities,
    stats_from_responsibilities,
)
from .swgmm import JITTER, TWO_PI, Swgmm, as_observations, floor_covariances, mixture_density, wrap_angle, wrap_pi

_CHUNK = 512


@dataclass(frozen=True)
class MeanShiftConfig:
    bandwidth_theta: float = 0.7
    bandwidth_rho: float = 0.4
    convergence_eps: float = 1e-5
    max_iter: int = 100
    # None means half the bandwidth on each axis
    merge_theta: Optional[float] = None
    merge_rho: Optional[float] = None

    def __post_init__(self):
        for name in ("bandwidth_theta", "bandwidth_rho", "convergence_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        for name in ("merge_theta", "merge_rho"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def merge_dist(self) -> tuple[float, float]:
        mt = 0.5 * self.bandwidth_theta if self.merge_theta is None else self.merge_theta
        mr = 0.5 * self.bandwidth_rho if self.merge_rho is None else self.merge_rho
        return mt, mr

    @property
    def initial_cov(self) -> np.ndarray:
        return np.diag([self.bandwidth_theta**2, self.bandwidth_rho**2])


@dataclass(frozen=True)
class EmConfig:
    convergence_eps: float = 1e-5
    max_iter: int = 100
    min_weight: float = 1e-4
    jitter: float = JITTER

    def __post_init__(self):
        if not (self.convergence_eps > 0 and self.min_weight > 0 and self.jitter > 0):
            raise ValueError("EM tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class BuildConfig:
    mean_shift: MeanShiftConfig = field(default_factory=MeanShiftConfig)
    em: EmConfig = field(default_factory=EmConfig)


def _shift_step(X, sin_t, cos_t, P, ht, hr):
    dth = wrap_pi(X[None, :, 0] - P[:, None, 0])
    drh = X[None, :, 1] - P[:, None, 1]
    k = np.exp(-0.5 * ((dth / ht) ** 2 + (drh / hr) ** 2))
    ksum = k.sum(axis=1)
    new = np.empty_like(P)
    new[:, 0] = wrap_angle(np.arctan2(k @ sin_t, k @ cos_t))
    new[:, 1] = (k @ X[:, 1]) / ksum
    return new


def mean_shift_modes(obs, cfg: MeanShiftConfig = MeanShiftConfig()) -> np.ndarray:
    """Modes of a Gaussian-kernel density on the cylinder, as a ``(M, 2)`` array.

    Every observation ascends the kernel density; headings move to the
    kernel-weighted circular mean. Converged points closer than the merge
    distance on both axes are pooled, and modes are returned largest basin
    first (ties keep input order).
    """
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    ht, hr = cfg.bandwidth_theta, cfg.bandwidth_rho
    sin_t, cos_t = np.sin(X[:, 0]), np.cos(X[:, 0])
    pts = X.copy()
    active = np.ones(X.shape[0], dtype=bool)
    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        for start in range(0, idx.size, _CHUNK):
            sub = idx[start : start + _CHUNK]
            new = _shift_step(X, sin_t, cos_t, pts[sub], ht, hr)
            moved = np.maximum(np.abs(wrap_pi(new[:, 0] - pts[sub, 0])), np.abs(new[:, 1] - pts[sub, 1]))
            pts[sub] = new
            active[sub] = moved >= cfg.convergence_eps

    return _merge_modes(pts, cfg)


def _loglik(p: np.ndarray) -> float:
    return float(np.mean(np.log(np.maximum(p, np.finfo(float).tiny))))


def mean_loglik(model: Swgmm, X: np.ndarray) -> float:
    return _loglik(mixture_density(model, X))


def em_step(model: Swgmm, obs, cfg: EmConfig = EmConfig()) -> tuple[Swgmm, SufficientStats]:
    """One full EM iteration: batch E-step followed by the M-step."""
    return m_step(batch_stats(model, obs), prune_below=cfg.min_weight, jitter=cfg.jitter)


def em_fit(
    obs,
    seeds,
    cfg: EmConfig = EmConfig(),
    init_cov=None,
    trace: Optional[list] = None,
) -> tuple[Swgmm, SufficientStats]:
    """Fit a mixture by EM starting from one equal-weight component per seed.

    Iterates until the mean per-point log-likelihood changes by less than
    ``cfg.convergence_eps`` or ``cfg.max_iter`` is reached. If ``trace`` is a
    list, ``(mean_loglik, n_components)`` is appended for the initial model
    and after every iteration.

    Returns the fitted model and the batch statistics at its parameters.
    """
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    S = as_observations(seeds)
    if S.shape[0] == 0:
        raise ValueError("no seeds")
    J = S.shape[0]
    cov = MeanShiftConfig().initial_cov if init_cov is None else np.asarray(init_cov, dtype=float)
    model = Swgmm(np.full(J, 1.0 / J), S, np.repeat(cov[None], J, axis=0), jitter=cfg.jitter)
    # the E-step densities of a model also give its log-likelihood
    r = responsibilities(model, X)
    stats = stats_from_responsibilities(model, X, r)
    ll = _loglik(r.density)
    if trace is not None:
        trace.append((ll, model.n_components))
    for _ in range(cfg.max_iter):
        model, _ = m_step(stats, prune_below=cfg.min_weight, jitter=cfg.jitter)
        r = responsibilities(model, X)
        stats = stats_from_responsibilities(model, X, r)
        ll_new = _loglik(r.density)
        if trace is not None:
            trace.append((ll_new, model.n_components))
        done = abs(ll_new - ll) < cfg.convergence_eps
        ll = ll_new
        if done:
            break
    return model, stats


def build_cell(obs, cfg: BuildConfig = BuildConfig(), iteration: int = 0) -> CellState:
    """Mean shift then EM on a location's first batch."""
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    seeds = mean_shift_modes(X, cfg.mean_shift)
    model, stats = em_fit(X, seeds, cfg.em, init_cov=cfg.mean_shift.initial_cov)
    return CellState(model, stats, float(X.shape[0]), iteration)


# -- many locations at once ---------------------------------------------------

_PAIR_CHUNK = 1 << 21
_SMALL_SET = 64


def _merge_modes(pts: np.ndarray, cfg: MeanShiftConfig) -> np.ndarray:
    mt, mr = cfg.merge_dist
    anchors: list[tuple[float, float]] = []
    members: list[list[int]] = []
    for i, (t, r) in enumerate(pts.tolist()):
        for (at, ar), mem in zip(anchors, members):
            d = (t - at + math.pi) % TWO_PI - math.pi
            if abs(d) <= mt and abs(r - ar) <= mr:
                mem.append(i)
                break
        else:
            anchors.append((t, r))
            members.append([i])
    modes = []
    for mem in members:
        grp = pts[mem]
        th = math.atan2(np.sin(grp[:, 0]).sum(), np.cos(grp[:, 0]).sum())
        modes.append((len(mem), wrap_angle(th), float(grp[:, 1].mean())))
    order = sorted(range(len(modes)), key=lambda m: -modes[m][0])
    return np.array([[modes[m][1], modes[m][2]] for m in order])


def mean_shift_many(obs_list, cfg: MeanShiftConfig = MeanShiftConfig()) -> list[np.ndarray]:
    """:func:`mean_shift_modes` for several independent observation sets.

    Large sets use the dense per-set iteration; small sets are iterated
    together so per-set overhead does not dominate.
    """
    Xs = [as_observations(o) for o in obs_list]
    if any(x.shape[0] == 0 for x in Xs):
        raise ValueError("no observations")
    out: list = [None] * len(Xs)
    small = [i for i, x in enumerate(Xs) if x.shape[0] < _SMALL_SET]
    for i in set(range(len(Xs))) - set(small):
        out[i] = mean_shift_modes(Xs[i], cfg)
    if small:
        for i, modes in zip(small, _mean_shift_pairs([Xs[i] for i in small], cfg)):
            out[i] = modes
    return out


def _mean_shift_pairs(Xs: list[np.ndarray], cfg: MeanShiftConfig) -> list[np.ndarray]:
    counts = np.array([x.shape[0] for x in Xs])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    X = np.concatenate(Xs)
    gid = np.repeat(np.arange(len(Xs)), counts)
    sin_t, cos_t = np.sin(X[:, 0]), np.cos(X[:, 0])
    ht, hr = cfg.bandwidth_theta, cfg.bandwidth_rho
    pts = X.copy()
    active = np.ones(X.shape[0], dtype=bool)
    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        width = counts[gid[idx]]
        ends = np.cumsum(width)
        # split the active points so each chunk holds a bounded number of pairs
        cuts = np.searchsorted(ends, np.arange(_PAIR_CHUNK, ends[-1], _PAIR_CHUNK))
        for sub in np.split(idx, np.unique(cuts + 1)) if cuts.size else [idx]:
            if sub.size == 0:
                continue
            w = counts[gid[sub]]
            row_start = np.concatenate([[0], np.cumsum(w)[:-1]])
            cols = np.repeat(starts[gid[sub]] - row_start, w) + np.arange(w.sum())
            rows = np.repeat(np.arange(sub.size), w)
            p = pts[sub][rows]
            dth = wrap_pi(X[cols, 0] - p[:, 0])
            k = np.exp(-0.5 * ((dth / ht) ** 2 + ((X[cols, 1] - p[:, 1]) / hr) ** 2))
            ks = np.add.reduceat(k, row_start)
            new = np.empty((sub.size, 2))
            new[:, 0] = wrap_angle(np.arctan2(np.add.reduceat(k * sin_t[cols], row_start), np.add.reduceat(k * cos_t[cols], row_start)))
            new[:, 1] = np.add.reduceat(k * X[cols, 1], row_start) / ks
            moved = np.maximum(np.abs(wrap_pi(new[:, 0] - pts[sub, 0])), np.abs(new[:, 1] - pts[sub, 1]))
            pts[sub] = new
            active[sub] = moved >= cfg.convergence_eps
    return [_merge_modes(pts[s : s + n], cfg) for s, n in zip(starts, counts)]


def em_fit_many(obs_list, seeds_list, cfg: EmConfig = EmConfig(), init_cov=None) -> list:
    """:func:`em_fit` for several independent sets, iterated in lockstep.

    Each set stops on its own convergence test. Entries are ``(model,
    stats)`` pairs, or the exception the single-set fit would have raised.
    """
    Xs = [as_observations(o) for o in obs_list]
    Ss = [as_observations(s) for s in seeds_list]
    G = len(Xs)
    out: list = [None] * G
    if G == 0:
        return out
    if any(x.shape[0] == 0 for x in Xs):
        raise ValueError("no observations")
    if any(s.shape[0] == 0 for s in Ss):
        raise ValueError("no seeds")
    cov0 = MeanShiftConfig().initial_cov if init_cov is None else np.asarray(init_cov, dtype=float)
    cov0 = floor_covariances(cov0[None], cfg.jitter)[0]
    Js = np.array([s.shape[0] for s in Ss])
    J = int(Js.max())
    real = np.arange(J)[None, :] < Js[:, None]
    W = np.where(real, 1.0 / Js[:, None], 0.0)
    M = np.zeros((G, J, 2))
    for g, s in enumerate(Ss):
        M[g, : Js[g]] = s
    C = np.tile(cov0, (G, J, 1, 1))
    counts = np.array([x.shape[0] for x in Xs])
    X = np.concatenate(Xs)
    gid_all = np.repeat(np.arange(G), counts)
    active = np.ones(G, dtype=bool)
    ll = np.zeros(G)

    def e_step(rows):
        mask = np.isin(gid_all, rows) if rows.size < G else np.ones(X.shape[0], dtype=bool)
        remap = np.full(G, -1)
        remap[rows] = np.arange(rows.size)
        e = grouped_e_step(X[mask], remap[gid_all[mask]], counts[rows], W[rows], M[rows], C[rows], real[rows])
        lp = np.log(np.maximum(e.density, np.finfo(float).tiny))
        starts = np.concatenate([[0], np.cumsum(counts[rows])[:-1]])
        return e, np.add.reduceat(lp, starts) / counts[rows]

    def finish(rows, e):
        for i, g in enumerate(rows):
            sel = real[g]
            model = Swgmm._unchecked(W[g, sel], M[g, sel], C[g, sel])
            stats = SufficientStats(e.s1[i, sel], e.s2[i, sel], e.s3[i, sel])
            out[g] = (model, stats)

    rows = np.arange(G)
    e, ll = e_step(rows)
    for _ in range(cfg.max_iter):
        m = grouped_m_step(e.s1, e.s2, e.s3, real[rows], prune_below=cfg.min_weight, jitter=cfg.jitter)
        for i in np.flatnonzero(m.collapsed):
            out[rows[i]] = StatsCollapsed("statistics collapsed")
        ok = ~m.collapsed
        rows, m_keep = rows[ok], m.keep[ok]
        if rows.size == 0:
            return out
        real[rows] = m_keep
        W[rows], M[rows], C[rows] = m.weights[ok], m.means[ok], m.covs[ok]
        prev = ll[ok]
        e, ll = e_step(rows)
        done = np.abs(ll - prev) < cfg.convergence_eps
        finish(rows[done], _take(e, done))
        rows, e, ll = rows[~done], _take(e, ~done), ll[~done]
        if rows.size == 0:
            return out
    finish(rows, e)
    return out


def _take(e, mask):
    return e._replace(s1=e.s1[mask], s2=e.s2[mask], s3=e.s3[mask])


def build_cells(obs_list, cfg: BuildConfig = BuildConfig(), iteration: int = 0) -> list:
    """:func:`build_cell` for several locations; failures come back as exceptions."""
    Xs = [as_observations(o) for o in obs_list]
    out: list = [None] * len(Xs)
    todo = [i for i, x in enumerate(Xs) if x.shape[0]]
    for i in set(range(len(Xs))) - set(todo):
        out[i] = ValueError("no observations")
    if not todo:
        return out
    seeds = mean_shift_many([Xs[i] for i in todo], cfg.mean_shift)
    fits = em_fit_many([Xs[i] for i in todo], seeds, cfg.em, init_cov=cfg.mean_shift.initial_cov)
    for i, fit in zip(todo, fits):
        if isinstance(fit, Exception):
            out[i] = fit
        else:
            out[i] = CellState(fit[0], fit[1], float(Xs[i].shape[0]), iteration)
    return out
