import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cliffmap.swgmm import (
    JITTER,
    Swgmm,
    Swnd,
    Velocity,
    as_observations,
    mean_nll,
    mixture_density,
    sample,
    swgmm_pdf,
    swnd_pdf,
    wrap_angle,
)

# frozen from tests/oracles.py
TIGHT_PEAK = 15.915494309189533
ANTIPODE_SUM = 0.01144623786220095
ANTIPODE_CENTRE_TERM = 0.005723118931100475
ANTIPODE_OUTER_TERM = 4.0961311284378804e-20
MIX_AT_A = 0.3175152322286493
MIX_AT_B = 0.04834361060553894

MIX = Swgmm(
    [0.3, 0.7],
    [(1.0, 1.1), (4.0, 0.7)],
    [[[0.2, 0.03], [0.03, 0.05]], [[0.5, -0.02], [-0.02, 0.09]]],
)


@st.composite
def mixtures(draw, max_j=3):
    j = draw(st.integers(1, max_j))
    raw = [draw(st.floats(0.05, 1.0)) for _ in range(j)]
    weights = np.array(raw) / sum(raw)
    means, covs = [], []
    for _ in range(j):
        means.append((draw(st.floats(0.0, 2 * math.pi - 1e-9)), draw(st.floats(0.2, 3.0))))
        l1, l2 = draw(st.floats(1e-4, 1.0)), draw(st.floats(1e-4, 1.0))
        a = draw(st.floats(0.0, math.pi))
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        covs.append(R @ np.diag([l1, l2]) @ R.T)
    return Swgmm(weights, means, covs)


class TestVelocity:
    def test_wraps_heading(self):
        v = Velocity(-0.5, 1.0)
        assert v.theta == pytest.approx(2 * math.pi - 0.5)
        assert 0.0 <= Velocity(2 * math.pi, 1.0).theta < 2 * math.pi

    def test_rejects_negative_speed(self):
        with pytest.raises(ValueError):
            Velocity(0.0, -0.1)

    def test_tiny_negative_angle_wraps_inside_range(self):
        assert wrap_angle(-1e-18) == 0.0


class TestSwnd:
    def test_covariance_symmetrized_and_floored(self):
        d = Swnd((7.0, 1.0), [[1e-9, 0.0], [1e-12, 1e-9]])
        assert np.allclose(d.sigma, d.sigma.T, atol=1e-12)
        assert np.linalg.eigvalsh(d.sigma).min() >= JITTER * (1 - 1e-9)
        assert 0.0 <= d.mu[0] < 2 * math.pi

    def test_peak_of_tight_component(self):
        d = Swnd((math.pi, 1.0), np.diag([0.01, 0.01]))
        assert swnd_pdf(d, Velocity(math.pi, 1.0)) == pytest.approx(TIGHT_PEAK, rel=1e-12)

    def test_periodic_in_raw_angle(self):
        d = Swnd((0.4, 1.0), [[0.3, 0.02], [0.02, 0.05]])
        assert swnd_pdf(d, (0.3, 1.0)) == swnd_pdf(d, (0.3 + 2 * math.pi, 1.0))

    def test_antipode_is_three_term_sum(self):
        d = Swnd((0.0, 1.0), np.diag([1.0, 0.04]))
        assert swnd_pdf(d, Velocity(math.pi, 1.0)) == pytest.approx(ANTIPODE_SUM, rel=1e-12)
        assert ANTIPODE_SUM == pytest.approx(2 * ANTIPODE_CENTRE_TERM + ANTIPODE_OUTER_TERM, rel=1e-14)


class TestMixture:
    def test_single_component_matches_swnd(self):
        d = Swnd((2.0, 1.3), [[0.1, 0.01], [0.01, 0.04]])
        assert swgmm_pdf(Swgmm.single(d), (2.2, 1.1)) == swnd_pdf(d, (2.2, 1.1))

    def test_duplicate_components(self):
        d = Swnd((2.0, 1.3), [[0.1, 0.01], [0.01, 0.04]])
        m = Swgmm.from_components([(0.5, d), (0.5, d)])
        assert swgmm_pdf(m, (2.2, 1.1)) == pytest.approx(swnd_pdf(d, (2.2, 1.1)), rel=1e-15)

    def test_weighted_sum_against_oracle(self):
        assert swgmm_pdf(MIX, (1.3, 1.0)) == pytest.approx(MIX_AT_A, rel=1e-12)
        assert swgmm_pdf(MIX, (5.5, 0.8)) == pytest.approx(MIX_AT_B, rel=1e-12)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            Swgmm([0.5, 0.6], [(0, 1), (1, 1)], [np.eye(2), np.eye(2)])
        with pytest.raises(ValueError):
            Swgmm([], np.zeros((0, 2)), np.zeros((0, 2, 2)))

    @given(mixtures(), st.floats(-20, 20), st.floats(0, 4))
    def test_matches_oracle(self, m, theta, rho):
        expected = oracles.mixture_pdf(theta, rho, m.weights, m.means.tolist(), m.covs.tolist())
        assert swgmm_pdf(m, (theta, rho)) == pytest.approx(expected, rel=1e-9, abs=1e-300)

    @given(mixtures(), st.floats(-20, 20), st.floats(0, 4))
    def test_exactly_periodic(self, m, theta, rho):
        assert swgmm_pdf(m, (theta, rho)) == swgmm_pdf(m, (wrap_angle(theta), rho))

    @given(mixtures(), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, m, rnd):
        perm = list(range(m.n_components))
        rnd.shuffle(perm)
        shuffled = Swgmm(m.weights[perm], m.means[perm], m.covs[perm])
        X = np.array([[0.1, 1.0], [3.0, 0.5], [6.0, 2.0]])
        assert np.allclose(mixture_density(m, X), mixture_density(shuffled, X), rtol=1e-12, atol=0)

    @settings(max_examples=20)
    @given(mixtures())
    def test_integrates_to_one(self, m):
        total = oracles.integrate_cylinder(lambda X: mixture_density(m, X), m.means, m.covs)
        assert total == pytest.approx(1.0, abs=2e-3)


class TestMeanNll:
    def test_density_e_inverse_gives_one(self):
        # choose the covariance so the peak density is exactly 1/e
        s = 1.0 / math.sqrt(2 * math.pi / math.e)
        m = Swgmm.single(Swnd((1.0, 1.0), np.diag([s * s, s * s])))
        # wrapped images add ~e^-(2pi)^2/(2 s^2), far below double precision here
        assert mean_nll(m, [Velocity(1.0, 1.0)]) == pytest.approx(1.0, abs=1e-12)

    def test_floor_clamps(self):
        m = Swgmm.single(Swnd((1.0, 1.0), np.diag([1e-4, 1e-4])))
        assert mean_nll(m, [(1.0, 50.0)]) == pytest.approx(-math.log(1e-9))

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="no observations"):
            mean_nll(MIX, [])

    def test_sampled_points_against_oracle(self):
        X = sample(MIX, 100, seed=3)
        expected = oracles.mean_nll(X.tolist(), MIX.weights, MIX.means.tolist(), MIX.covs.tolist())
        assert mean_nll(MIX, X) == pytest.approx(expected, abs=1e-9)


class TestSample:
    def test_circular_mean(self):
        m = Swgmm.single(Swnd((0.2, 1.0), np.diag([0.09, 0.01])))
        X = sample(m, 10000, seed=0)
        assert oracles.ang_dist(oracles.circ_mean(X[:, 0]), 0.2) < 0.05

    def test_deterministic(self):
        assert np.array_equal(sample(MIX, 50, 7), sample(MIX, 50, 7))

    def test_degenerate_weights(self):
        m = Swgmm([1.0, 0.0], [(1.0, 1.0), (4.0, 1.0)], [np.eye(2) * 0.01] * 2)
        X = sample(m, 500, seed=1)
        assert np.all(np.abs(X[:, 0] - 1.0) < 1.0)

    def test_wrapped_and_nonnegative(self):
        m = Swgmm.single(Swnd((0.0, 0.05), np.diag([1.0, 0.04])))
        X = sample(m, 2000, seed=2)
        assert X[:, 0].min() >= 0 and X[:, 0].max() < 2 * math.pi
        assert X[:, 1].min() >= 0.0

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            sample(MIX, 0, seed=0)

    def test_as_observations_accepts_velocities(self):
        X = as_observations([Velocity(7.0, 1.0), Velocity(1.0, 2.0)])
        assert X.shape == (2, 2) and X[0, 0] == pytest.approx(7.0 - 2 * math.pi)
