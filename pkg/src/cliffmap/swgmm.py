"""Semi-wrapped normal distributions over (direction, speed) and their mixtures.

Observations are handled as float arrays of shape ``(N, 2)`` with columns
``(theta, rho)``; :class:`Velocity` is the scalar value type and every
function taking observations accepts either form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi
WINDINGS = np.array([-1.0, 0.0, 1.0])
JITTER = 1e-6
LIKELIHOOD_FLOOR = 1e-9


def wrap_angle(theta):
    """Wrap angles into ``[0, 2pi)``. Works on scalars and arrays."""
    out = np.mod(theta, TWO_PI)
    # np.mod returns 2pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def wrap_pi(delta):
    """Wrap angle differences into ``[-pi, pi)``."""
    out = np.mod(np.asarray(delta, dtype=float) + math.pi, TWO_PI) - math.pi
    if np.ndim(out) == 0:
        return float(out)
    return out


def circular_mean(theta, weights=None) -> float:
    theta = np.asarray(theta, dtype=float)
    w = np.ones_like(theta) if weights is None else np.asarray(weights, dtype=float)
    return wrap_angle(math.atan2(float(np.sum(w * np.sin(theta))), float(np.sum(w * np.cos(theta)))))


@dataclass(frozen=True)
class Velocity:
    """A single motion observation: heading ``theta`` (rad) and speed ``rho`` (m/s)."""

    theta: float
    rho: float

    def __post_init__(self):
        if not (self.rho >= 0.0):
            raise ValueError(f"speed must be non-negative, got {self.rho}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "rho", float(self.rho))


Observations = Union[np.ndarray, Sequence[Velocity], Sequence[Sequence[float]]]


def as_observations(obs: Observations) -> np.ndarray:
    """Convert observations into a fresh ``(N, 2)`` array with wrapped headings."""
    if isinstance(obs, np.ndarray):
        arr = np.array(obs, dtype=float, copy=True)
    else:
        obs = list(obs)
        if obs and isinstance(obs[0], Velocity):
            arr = np.array([(v.theta, v.rho) for v in obs], dtype=float)
        else:
            arr = np.array(obs, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 2))
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"observations must have shape (N, 2), got {arr.shape}")
    arr[:, 0] = wrap_angle(arr[:, 0])
    return arr


def to_velocities(arr: np.ndarray) -> list[Velocity]:
    return [Velocity(float(t), float(r)) for t, r in np.asarray(arr)]


def floor_covariances(covs: np.ndarray, jitter: float = JITTER) -> np.ndarray:
    """Symmetrize a stack of 2x2 matrices and lift eigenvalues to ``jitter``.

    Matrices that already satisfy the floor are returned bit-for-bit, so
    re-validating a stored model never perturbs it.
    """
    covs = np.array(covs, dtype=float, copy=True).reshape(-1, 2, 2)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_min = half_tr - disc
    bad = ~(lam_min >= jitter * (1.0 - 1e-6))
    if np.any(bad):
        vals, vecs = np.linalg.eigh(covs[bad])
        fixed = (vecs * np.maximum(vals, jitter)[:, None, :]) @ np.swapaxes(vecs, 1, 2)
        covs[bad] = 0.5 * (fixed + np.swapaxes(fixed, 1, 2))
    return covs


@dataclass(frozen=True, eq=False)
class Swnd:
    """Semi-wrapped bivariate normal: Gaussian in (theta, rho), theta wrapped."""

    mu: np.ndarray
    sigma: np.ndarray

    def __init__(self, mu, sigma, jitter: float = JITTER):
        mu = np.array(mu, dtype=float).reshape(2)
        mu[0] = wrap_angle(mu[0])
        sigma = floor_covariances(np.asarray(sigma, dtype=float).reshape(1, 2, 2), jitter)[0]
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def __eq__(self, other):
        return (
            isinstance(other, Swnd)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.sigma, other.sigma)
        )


@dataclass(frozen=True, eq=False)
class Swgmm:
    """Weighted mixture of semi-wrapped normals stored as stacked arrays.

    ``weights`` has shape ``(J,)``, ``means`` ``(J, 2)`` and ``covs``
    ``(J, 2, 2)``. Construction validates the weights (non-negative, summing
    to one within 1e-9) and floors the covariances.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __init__(self, weights, means, covs, jitter: float = JITTER):
        weights = np.array(weights, dtype=float).reshape(-1)
        means = np.array(means, dtype=float).reshape(-1, 2)
        covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
        J = weights.shape[0]
        if J < 1:
            raise ValueError("mixture needs at least one component")
        if means.shape[0] != J or covs.shape[0] != J:
            raise ValueError("weights, means and covs disagree on component count")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("mixture weights must be finite and non-negative")
        if abs(float(np.sum(weights)) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {float(np.sum(weights))!r}, expected 1")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            raise ValueError("non-finite mixture parameters")
        means[:, 0] = wrap_angle(means[:, 0])
        covs = floor_covariances(covs, jitter)
        for arr in (weights, means, covs):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @classmethod
    def _unchecked(cls, weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> "Swgmm":
        # caller guarantees the invariants (used by the vectorized M-step)
        obj = object.__new__(cls)
        for name, arr in (("weights", weights), ("means", means), ("covs", covs)):
            arr.setflags(write=False)
            object.__setattr__(obj, name, arr)
        return obj

    @classmethod
    def from_components(cls, components: Iterable[tuple[float, Swnd]]) -> "Swgmm":
        components = list(components)
        return cls(
            [w for w, _ in components],
            [d.mu for _, d in components],
            [d.sigma for _, d in components],
        )

    @classmethod
    def single(cls, dist: Swnd) -> "Swgmm":
        return cls([1.0], [dist.mu], [dist.sigma])

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def components(self) -> list[tuple[float, Swnd]]:
        return [(float(w), Swnd(m, c)) for w, m, c in zip(self.weights, self.means, self.covs)]

    def dominant(self) -> int:
        return int(np.argmax(self.weights))

    def __eq__(self, other):
        return (
            isinstance(other, Swgmm)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
        )


def winding_densities(X: np.ndarray, means: np.ndarray, covs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted Gaussian densities for every (observation, component, winding).

    The heading difference is first wrapped into ``[-pi, pi)`` and the three
    images ``delta + 2pi*w`` for ``w in {-1, 0, 1}`` are evaluated. Returns the
    ``(N, J, 3)`` densities and the ``(N, J, 3)`` unwrapped heading offsets
    relative to each component mean.
    """
    d_theta = wrap_pi(X[:, None, 0] - means[None, :, 0])
    d_rho = X[:, None, 1] - means[None, :, 1]
    dt = d_theta[..., None] + TWO_PI * WINDINGS
    dr = d_rho[..., None]
    a = covs[:, 0, 0][None, :, None]
    b = covs[:, 0, 1][None, :, None]
    c = covs[:, 1, 1][None, :, None]
    det = a * c - b * b
    maha = (c * dt * dt - 2.0 * b * dt * dr + a * dr * dr) / det
    dens = np.exp(-0.5 * maha) / (TWO_PI * np.sqrt(det))
    return dens, dt


def component_densities(model: Swgmm, X: np.ndarray) -> np.ndarray:
    """Unweighted semi-wrapped density of each component, shape ``(N, J)``."""
    dens, _ = winding_densities(X, model.means, model.covs)
    return dens.sum(axis=2)


def swnd_pdf(dist: Swnd, v) -> float:
    X = as_observations([v] if isinstance(v, Velocity) else np.reshape(v, (1, 2)))
    dens, _ = winding_densities(X, dist.mu[None, :], dist.sigma[None, :, :])
    return float(dens.sum())


def mixture_density(model: Swgmm, obs: Observations) -> np.ndarray:
    """Vectorized mixture density for many observations."""
    X = as_observations(obs)
    if X.shape[0] == 0:
        return np.zeros(0)
    return component_densities(model, X) @ model.weights


def swgmm_pdf(model: Swgmm, v) -> float:
    X = as_observations([v] if isinstance(v, Velocity) else np.reshape(v, (1, 2)))
    return float(mixture_density(model, X)[0])


def mean_nll(model: Swgmm, obs: Observations, floor: float = LIKELIHOOD_FLOOR) -> float:
    """Mean negative log-likelihood with densities clamped below at ``floor``."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    X = as_observations(obs)
    if X.shape[0] == 0:
        raise ValueError("no observations")
    p = mixture_density(model, X)
    return float(np.mean(-np.log(np.maximum(p, floor))))


def sample(model: Swgmm, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` observations; headings wrapped, negative speeds clamped to 0."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(model.n_components, size=n, p=model.weights)
    chol = np.linalg.cholesky(model.covs)
    z = rng.standard_normal((n, 2))
    draws = model.means[idx] + np.einsum("nij,nj->ni", chol[idx], z)
    draws[:, 0] = wrap_angle(draws[:, 0])
    draws[:, 1] = np.maximum(draws[:, 1], 0.0)
    return draws
