"""Responsibilities, sufficient statistics and the M-step shared by batch and online EM.

Statistics are kept per component in the frame where the implied heading
mean ``s2[0] / s1`` lies in ``[0, 2pi)``. Batch statistics are computed from
observations unwrapped around each component's (wrapped) mean, so stored and
fresh statistics always live in the same frame and can be blended linearly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .swgmm import JITTER, TWO_PI, WINDINGS, Swgmm, as_observations, floor_covariances, winding_densities, wrap_angle, wrap_pi

PRUNE_BELOW = 1e-6


class StatsCollapsed(RuntimeError):
    """Every component fell below the pruning threshold."""


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Per-component statistics ``(s1, s2, s3)`` stacked over components.

    ``s1`` has shape ``(J,)``, ``s2`` ``(J, 2)`` and ``s3`` ``(J, 2, 2)``.
    Indexing returns the triple for one component.
    """

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray

    def __init__(self, s1, s2, s3):
        s1 = np.array(s1, dtype=float).reshape(-1)
        s2 = np.array(s2, dtype=float).reshape(-1, 2)
        s3 = np.array(s3, dtype=float).reshape(-1, 2, 2)
        if not (s1.shape[0] == s2.shape[0] == s3.shape[0]):
            raise ValueError("statistics partitions disagree on component count")
        s3 = 0.5 * (s3 + np.swapaxes(s3, 1, 2))
        for arr in (s1, s2, s3):
            arr.setflags(write=False)
        object.__setattr__(self, "s1", s1)
        object.__setattr__(self, "s2", s2)
        object.__setattr__(self, "s3", s3)

    @classmethod
    def _unchecked(cls, s1: np.ndarray, s2: np.ndarray, s3: np.ndarray) -> "SufficientStats":
        obj = object.__new__(cls)
        for name, arr in (("s1", s1), ("s2", s2), ("s3", s3)):
            arr.setflags(write=False)
            object.__setattr__(obj, name, arr)
        return obj

    def __len__(self) -> int:
        return int(self.s1.shape[0])

    def __getitem__(self, j: int):
        return float(self.s1[j]), self.s2[j].copy(), self.s3[j].copy()

    def __eq__(self, other):
        return (
            isinstance(other, SufficientStats)
            and np.array_equal(self.s1, other.s1)
            and np.array_equal(self.s2, other.s2)
            and np.array_equal(self.s3, other.s3)
        )

    def scaled(self, factor) -> "SufficientStats":
        f = np.broadcast_to(np.asarray(factor, dtype=float), self.s1.shape)
        return SufficientStats(self.s1 * f, self.s2 * f[:, None], self.s3 * f[:, None, None])

    def select(self, mask) -> "SufficientStats":
        return SufficientStats(self.s1[mask], self.s2[mask], self.s3[mask])

    def concat(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(
            np.concatenate([self.s1, other.s1]),
            np.concatenate([self.s2, other.s2]),
            np.concatenate([self.s3, other.s3]),
        )

    def shifted(self, delta_theta) -> "SufficientStats":
        """Re-express the statistics after translating headings by ``delta_theta``."""
        c = np.broadcast_to(np.asarray(delta_theta, dtype=float), self.s1.shape)
        s2 = self.s2.copy()
        s3 = self.s3.copy()
        s2[:, 0] = self.s2[:, 0] + c * self.s1
        s3[:, 0, 0] = self.s3[:, 0, 0] + 2.0 * c * self.s2[:, 0] + c * c * self.s1
        s3[:, 0, 1] = self.s3[:, 0, 1] + c * self.s2[:, 1]
        s3[:, 1, 0] = s3[:, 0, 1]
        return SufficientStats(self.s1, s2, s3)

    @classmethod
    def from_model(cls, model: Swgmm) -> "SufficientStats":
        """Statistics that the M-step maps back exactly onto ``model``."""
        w = model.weights
        mu = model.means
        second = model.covs + mu[:, :, None] * mu[:, None, :]
        return cls(w, w[:, None] * mu, w[:, None, None] * second)


@dataclass(frozen=True, eq=False)
class CellState:
    """Model, index-aligned statistics and decayed observation count for one location."""

    model: Swgmm
    stats: SufficientStats
    n_ind: float
    last_update_iter: int = 0

    def __post_init__(self):
        if len(self.stats) != self.model.n_components:
            raise ValueError(
                f"{len(self.stats)} statistics rows for {self.model.n_components} components"
            )
        if not (self.n_ind > 0):
            raise ValueError("n_ind must be positive")

    def __eq__(self, other):
        return (
            isinstance(other, CellState)
            and self.model == other.model
            and self.stats == other.stats
            and self.n_ind == other.n_ind
            and self.last_update_iter == other.last_update_iter
        )


class Responsibilities(NamedTuple):
    eta: np.ndarray  # (N, J), rows sum to one
    winding: np.ndarray  # (N, J, 3), posterior over windings within (i, j)
    offsets: np.ndarray  # (N, J, 3), unwrapped heading minus component mean
    density: np.ndarray  # (N,), mixture density
    unexplained: np.ndarray  # (N,) bool, density underflowed


def responsibilities(model: Swgmm, obs) -> Responsibilities:
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    dens, offsets = winding_densities(X, model.means, model.covs)
    joint = dens * model.weights[None, :, None]
    total = joint.sum(axis=(1, 2))
    unexplained = ~(total > 0.0)
    safe_total = np.where(unexplained, 1.0, total)
    joint = joint / safe_total[:, None, None]
    eta = joint.sum(axis=2)
    J = model.n_components
    centre = np.zeros(3)
    centre[1] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        winding = joint / eta[:, :, None]
    empty = ~(eta > 0.0)
    winding[empty] = centre
    if np.any(unexplained):
        eta[unexplained] = 1.0 / J
        winding[unexplained] = centre
    return Responsibilities(eta, winding, offsets, total, unexplained)


def stats_from_responsibilities(model: Swgmm, X: np.ndarray, r: Responsibilities) -> SufficientStats:
    N = X.shape[0]
    q = r.eta[:, :, None] * r.winding  # (N, J, 3)
    theta_u = model.means[None, :, 0, None] + r.offsets  # (N, J, 3)
    rho = X[:, 1][:, None, None]
    s1 = r.eta.sum(axis=0) / N
    qt = q * theta_u
    s2_t = qt.sum(axis=(0, 2))
    s2_r = (q * rho).sum(axis=(0, 2))
    s3_tt = (qt * theta_u).sum(axis=(0, 2))
    s3_tr = (qt * rho).sum(axis=(0, 2))
    s3_rr = (q * rho * rho).sum(axis=(0, 2))
    s2 = np.stack([s2_t, s2_r], axis=1) / N
    s3 = np.stack([np.stack([s3_tt, s3_tr], 1), np.stack([s3_tr, s3_rr], 1)], 1) / N
    return SufficientStats(s1, s2, s3)


def batch_stats(model: Swgmm, obs) -> SufficientStats:
    """Batch-averaged statistics of ``obs`` under ``model``."""
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    return stats_from_responsibilities(model, X, responsibilities(model, X))


def m_step(
    stats: SufficientStats, prune_below: float = PRUNE_BELOW, jitter: float = JITTER
) -> tuple[Swgmm, SufficientStats]:
    """Mixture parameters from statistics, plus the statistics re-framed to match.

    Components with ``s1`` below ``prune_below`` are dropped and the rest
    renormalized. The returned statistics sum to one in ``s1`` and are
    shifted so each implied heading mean lies in ``[0, 2pi)``.
    """
    keep = stats.s1 >= prune_below
    if not np.any(keep):
        raise StatsCollapsed("statistics collapsed")
    st = stats.select(keep)
    st = st.scaled(1.0 / float(np.sum(st.s1)))
    weights = st.s1 / np.sum(st.s1)
    mu = st.s2 / st.s1[:, None]
    cov = st.s3 / st.s1[:, None, None] - mu[:, :, None] * mu[:, None, :]
    model = Swgmm(weights, mu, cov, jitter=jitter)
    shift = model.means[:, 0] - mu[:, 0]
    if np.any(shift != 0.0):
        st = st.shifted(shift)
    return model, st


# -- many locations at once ---------------------------------------------------
# Groups are padded to a common component count; ``real`` marks the genuine
# components. Observations are concatenated group by group.


class GroupedEStep(NamedTuple):
    density: np.ndarray  # (P,) mixture density per observation
    s1: np.ndarray  # (G, J) batch-averaged statistics per group
    s2: np.ndarray  # (G, J, 2)
    s3: np.ndarray  # (G, J, 2, 2)
    comp_density: np.ndarray  # (P, J) unweighted density per component


def grouped_e_step(X, gid, counts, weights, means, covs, real) -> GroupedEStep:
    """Batch statistics for many groups; matches :func:`batch_stats` per group.

    ``gid`` gives each observation's row in the parameter arrays; rows are
    contiguous and every group in ``counts`` is non-empty.
    """
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    Mi, Ci = means[gid], covs[gid]
    d_theta = wrap_pi(X[:, None, 0] - Mi[:, :, 0])
    dt = d_theta[..., None] + TWO_PI * WINDINGS
    dr = (X[:, None, 1] - Mi[:, :, 1])[..., None]
    a, b, c = Ci[:, :, 0, 0, None], Ci[:, :, 0, 1, None], Ci[:, :, 1, 1, None]
    det = a * c - b * b
    dens = np.exp(-0.5 * (c * dt * dt - 2.0 * b * dt * dr + a * dr * dr) / det) / (TWO_PI * np.sqrt(det))
    Wi = weights[gid]
    joint = dens * Wi[:, :, None]
    total = joint.sum(axis=(1, 2))
    unexplained = ~(total > 0.0)
    joint = joint / np.where(unexplained, 1.0, total)[:, None, None]
    if np.any(unexplained):
        rows = np.flatnonzero(unexplained)
        live = real[gid[rows]]
        joint[rows] = 0.0
        joint[rows, :, 1] = live / live.sum(axis=1, keepdims=True)
    theta_u = Mi[:, :, 0, None] + dt
    rho = X[:, 1][:, None, None]
    qt = joint * theta_u
    qr = joint * rho

    def seg(v):
        return np.add.reduceat(v.sum(axis=2), starts, axis=0)

    n = np.asarray(counts, dtype=float)[:, None]
    s1 = seg(joint) / n
    s2 = np.stack([seg(qt), seg(qr)], axis=2) / n[..., None]
    s_tt, s_tr, s_rr = seg(qt * theta_u), seg(qt * rho), seg(qr * rho)
    s3 = np.stack([np.stack([s_tt, s_tr], 2), np.stack([s_tr, s_rr], 2)], 2) / n[..., None, None]
    return GroupedEStep(total, s1, s2, s3, dens.sum(axis=2))


class GroupedMStep(NamedTuple):
    keep: np.ndarray  # (G, J) surviving components
    collapsed: np.ndarray  # (G,) no component survived
    weights: np.ndarray  # (G, J), zero where not kept
    means: np.ndarray  # (G, J, 2) headings wrapped
    covs: np.ndarray  # (G, J, 2, 2) floored
    s1: np.ndarray  # normalized and re-framed statistics, as returned by m_step
    s2: np.ndarray
    s3: np.ndarray


def grouped_m_step(s1, s2, s3, real, prune_below: float = PRUNE_BELOW, jitter: float = JITTER) -> GroupedMStep:
    """Vectorized :func:`m_step` over padded groups."""
    s3 = 0.5 * (s3 + np.swapaxes(s3, -1, -2))
    keep = (s1 >= prune_below) & real
    total = np.where(keep, s1, 0.0).sum(axis=1)
    collapsed = total == 0.0
    scale = 1.0 / np.where(collapsed, 1.0, total)
    h1 = np.where(keep, s1 * scale[:, None], 0.0)
    h2 = s2 * scale[:, None, None]
    h3 = s3 * scale[:, None, None, None]
    norm = h1.sum(axis=1)
    weights = h1 / np.where(collapsed, 1.0, norm)[:, None]
    safe = np.where(keep, h1, 1.0)
    mu = h2 / safe[..., None]
    cov = h3 / safe[..., None, None] - mu[..., :, None] * mu[..., None, :]
    cov[~keep] = np.eye(2)
    mu[~keep] = 0.0
    cov = floor_covariances(cov.reshape(-1, 2, 2), jitter).reshape(cov.shape)
    mu_w = mu.copy()
    mu_w[..., 0] = wrap_angle(mu[..., 0])
    shift = mu_w[..., 0] - mu[..., 0]
    g2 = h2.copy()
    g3 = h3.copy()
    g2[..., 0] = h2[..., 0] + shift * h1
    g3[..., 0, 0] = h3[..., 0, 0] + 2.0 * shift * h2[..., 0] + shift * shift * h1
    g3[..., 0, 1] = h3[..., 0, 1] + shift * h2[..., 1]
    g3[..., 1, 0] = g3[..., 0, 1]
    return GroupedMStep(keep, collapsed, weights, mu_w, cov, h1, g2, g3)


def unpack_group(m: GroupedMStep, row: int) -> tuple[Swgmm, SufficientStats]:
    sel = m.keep[row]
    model = Swgmm._unchecked(m.weights[row, sel], m.means[row, sel], m.covs[row, sel])
    stats = SufficientStats._unchecked(m.s1[row, sel], m.s2[row, sel], m.s3[row, sel])
    return model, stats


def pad_models(models: list[Swgmm]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack mixtures into padded ``(weights, means, covs, real)`` arrays."""
    Js = np.array([m.n_components for m in models])
    G, J = len(models), int(Js.max())
    W = np.zeros((G, J))
    M = np.zeros((G, J, 2))
    C = np.tile(np.eye(2), (G, J, 1, 1))
    for g, m in enumerate(models):
        W[g, : Js[g]] = m.weights
        M[g, : Js[g]] = m.means
        C[g, : Js[g]] = m.covs
    return W, M, C, np.arange(J)[None, :] < Js[:, None]


def pad_stats(stats: list[SufficientStats], J: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    G = len(stats)
    P1, P2, P3 = np.zeros((G, J)), np.zeros((G, J, 2)), np.zeros((G, J, 2, 2))
    for g, s in enumerate(stats):
        n = len(s)
        P1[g, :n], P2[g, :n], P3[g, :n] = s.s1, s.s2, s.s3
    return P1, P2, P3
