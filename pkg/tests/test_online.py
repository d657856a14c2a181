import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from cliffmap.batch import build_cell, em_step
from cliffmap.online import (
    CellState,
    StatsCollapsed,
    SufficientStats,
    UpdateConfig,
    batch_stats,
    m_step,
    responsibilities,
    se_step,
    spawn_components,
    spawn_triggered,
    stepsize,
    update_cell,
    update_cells,
)
from cliffmap.swgmm import JITTER, Swgmm, Swnd, sample, wrap_angle


def heading_batch(rng, theta, n=200, sigma=math.radians(10), rho=1.0):
    return np.c_[wrap_angle(theta + rng.normal(0, sigma, n)), rng.normal(rho, 0.1, n)]


def model_batch(seed, n=200):
    """A 1-2 component model and a batch drawn from it."""
    rng = np.random.default_rng(seed)
    j = int(rng.integers(1, 3))
    w = rng.dirichlet(np.ones(j) * 3)
    means = np.c_[rng.uniform(0, 2 * math.pi, j), rng.uniform(0.6, 1.6, j)]
    covs = [np.diag([rng.uniform(0.02, 0.2), rng.uniform(0.005, 0.03)]) for _ in range(j)]
    m = Swgmm(w, means, covs)
    return m, sample(m, n, seed + 1)


def stats_of(*rows):
    return SufficientStats([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])


class TestStepsize:
    def test_example(self):
        assert stepsize(50, 100.0, 0.5) == (0.5, 100.0)

    def test_vanishing_history(self):
        for lam in (0.1, 0.5, 0.9):
            g, _ = stepsize(10, 1e-300, lam)
            assert g == 1.0

    def test_steady_state(self):
        n_ind, g = 1.0, None
        for _ in range(30):
            g, n_ind = stepsize(40, n_ind, 0.5)
        assert n_ind == pytest.approx(80.0, rel=1e-6)
        assert g == pytest.approx(0.5, rel=1e-6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            stepsize(0, 10.0, 0.5)

    @given(st.integers(1, 10_000), st.integers(1, 10_000), st.floats(1e-3, 1e5), st.floats(0.01, 0.99))
    def test_monotone(self, n1, n2, prev, lam):
        assume(n1 != n2)
        lo, hi = sorted((n1, n2))
        g_lo, _ = stepsize(lo, prev, lam)
        g_hi, n_new = stepsize(hi, prev, lam)
        assert 0 < g_lo < g_hi <= 1
        assert n_new == pytest.approx(lam * prev + hi)
        assert stepsize(lo, prev * 2, lam)[0] < g_lo


class TestSeStep:
    A = stats_of((0.8, (0.4, 0.8), np.eye(2)), (0.2, (1.0, 0.2), 2 * np.eye(2)))
    B = stats_of((0.4, (0.1, 0.4), 3 * np.eye(2)), (0.6, (3.0, 0.6), np.eye(2)))

    def test_gamma_one_returns_batch(self):
        assert se_step(self.A, self.B, 1.0) == self.B

    def test_fixed_point(self):
        assert se_step(self.A, self.A, 0.3) == self.A

    def test_arithmetic(self):
        assert se_step(self.A, self.B, 0.25).s1[0] == pytest.approx(0.7)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            se_step(self.A, self.B.select([True, False]), 0.5)

    @given(st.floats(1e-6, 1.0))
    def test_convex(self, g):
        out = se_step(self.A, self.B, g)
        for name in ("s1", "s2", "s3"):
            a, b, o = (getattr(x, name) for x in (self.A, self.B, out))
            assert np.all(o >= np.minimum(a, b) - 1e-12) and np.all(o <= np.maximum(a, b) + 1e-12)


class TestResponsibilities:
    def test_single_component(self):
        m = Swgmm.single(Swnd((1.0, 1.0), np.eye(2) * 0.1))
        r = responsibilities(m, np.array([[0.0, 0.5], [3.0, 2.0]]))
        assert np.all(r.eta == 1.0)

    def test_point_at_mean_of_far_component(self):
        m = Swgmm([0.5, 0.5], [(0.5, 1.0), (3.5, 1.0)], [np.diag([0.1, 0.02])] * 2)
        eta = responsibilities(m, [(0.5, 1.0)]).eta[0]
        p1 = oracles.swnd_pdf_centred(0.5, 1.0, (0.5, 1.0), [[0.1, 0], [0, 0.02]])
        p2 = oracles.swnd_pdf_centred(0.5, 1.0, (3.5, 1.0), [[0.1, 0], [0, 0.02]])
        assert eta[0] > 0.99
        assert eta[0] == pytest.approx(p1 / (p1 + p2), rel=1e-12)

    def test_identical_components(self):
        d = Swnd((2.0, 1.0), np.eye(2) * 0.1)
        m = Swgmm.from_components([(0.25, d), (0.75, d)])
        eta = responsibilities(m, [(1.0, 1.0), (2.5, 0.4)]).eta
        assert np.allclose(eta, [[0.25, 0.75]] * 2, atol=1e-15)

    def test_underflow_row_is_uniform(self):
        m = Swgmm([0.5, 0.5], [(0.5, 1.0), (3.5, 1.0)], [np.eye(2) * 1e-4] * 2)
        r = responsibilities(m, [(0.5, 1.0), (2.0, 90.0)])
        assert list(r.unexplained) == [False, True]
        assert np.allclose(r.eta[1], [0.5, 0.5])

    @given(st.integers(0, 10_000))
    def test_rows_normalized(self, seed):
        m, X = model_batch(seed)
        r = responsibilities(m, X)
        assert np.allclose(r.eta.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(r.winding.sum(axis=2), 1.0, atol=1e-9)


class TestBatchStats:
    def test_two_points(self):
        m = Swgmm.single(Swnd((1.1, 0.9), np.eye(2) * 0.01))
        S = batch_stats(m, [(1.0, 1.0), (1.2, 0.8)])
        assert S.s1[0] == pytest.approx(1.0)
        assert np.allclose(S.s2[0], [1.1, 0.9], atol=1e-14)
        assert np.allclose(S.s3[0], [[1.22, 0.98], [0.98, 0.82]], atol=1e-14)

    @given(st.integers(0, 10_000))
    def test_mass_sums_to_one(self, seed):
        m, X = model_batch(seed)
        assert batch_stats(m, X).s1.sum() == pytest.approx(1.0, abs=1e-9)

    def test_fixed_point_of_build(self):
        _, X = model_batch(3, 400)
        cell = build_cell(X)
        S = batch_stats(cell.model, X)
        assert np.allclose(S.s1, cell.stats.s1, atol=1e-6)
        assert np.allclose(S.s2, cell.stats.s2, atol=1e-6)
        assert np.allclose(S.s3, cell.stats.s3, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            batch_stats(Swgmm.single(Swnd((0, 1), np.eye(2))), [])


class TestMStep:
    def test_two_point_moments(self):
        X = np.array([[0.9, 1.0], [1.1, 1.0]])
        S = stats_of((1.0, X.mean(0), (X[:, :, None] * X[:, None, :]).mean(0)))
        model, _ = m_step(S)
        assert np.allclose(model.means[0], [1.0, 1.0])
        assert np.allclose(model.covs[0], np.diag([0.01, JITTER]), atol=1e-12)

    def test_weights(self):
        S = stats_of((0.5, (0.5, 0.5), np.eye(2)), (0.5, (1.0, 0.5), 3 * np.eye(2)))
        assert np.allclose(m_step(S)[0].weights, [0.5, 0.5])

    def test_reproduces_sample_covariance(self):
        rng = np.random.default_rng(2)
        X = np.c_[rng.normal(2.0, 0.3, 500), rng.normal(1.0, 0.1, 500)]
        S = stats_of((1.0, X.mean(0), (X[:, :, None] * X[:, None, :]).mean(0)))
        assert np.allclose(m_step(S)[0].covs[0], np.cov(X.T, bias=True), atol=1e-12)

    def test_prunes_and_renormalizes(self):
        S = stats_of((0.999_999_5, (1.0, 1.0), 2 * np.eye(2)), (5e-7, (5e-7, 5e-7), 1e-6 * np.eye(2)))
        model, stats = m_step(S)
        assert model.n_components == 1 and model.weights[0] == 1.0
        assert stats.s1[0] == pytest.approx(1.0)

    def test_collapse(self):
        with pytest.raises(StatsCollapsed, match="statistics collapsed"):
            m_step(stats_of((1e-8, (0, 0), np.eye(2) * 1e-8)))

    def test_wraps_heading_and_keeps_stats_consistent(self):
        S = stats_of((1.0, (7.0, 1.0), [[49.1, 7.0], [7.0, 1.01]]))
        model, st2 = m_step(S)
        assert model.means[0, 0] == pytest.approx(7.0 - 2 * math.pi)
        again, _ = m_step(st2)
        assert np.allclose(again.means, model.means) and np.allclose(again.covs, model.covs)


class TestSpawn:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.cell = build_cell(heading_batch(rng, 0.0))
        self.away = heading_batch(rng, math.pi)
        self.same = heading_batch(rng, 0.0)

    def test_opposite_batch_adds_mode(self):
        assert spawn_triggered(self.cell.model, self.away, 0.1)
        grown = spawn_components(self.cell, self.away, 0.5)
        assert grown.model.n_components >= 2
        new = grown.model.means[1:, 0]
        assert min(oracles.ang_dist(t, math.pi) for t in new) < math.radians(10)
        assert len(grown.stats) == grown.model.n_components

    def test_batch_on_existing_mode_is_noop(self):
        at_mode = np.tile(self.cell.model.means[0], (50, 1))
        assert spawn_components(self.cell, at_mode, 0.5) is self.cell

    def test_well_fit_batch_does_not_trigger(self):
        assert not spawn_triggered(self.cell.model, self.same, 0.1)
        out = update_cell(self.cell, self.same, 1)
        assert out.model.n_components == 1

    def test_weight_split(self):
        grown = spawn_components(self.cell, self.away, 0.5)
        assert grown.model.n_components == 2
        assert np.allclose(grown.model.weights, [0.5, 0.5])
        assert grown.stats.s1.sum() == pytest.approx(1.0)


class TestUpdateCell:
    def test_gamma_one_is_an_em_iteration(self):
        for seed in range(20):
            m, X = model_batch(seed)
            cell = CellState(m, SufficientStats.from_model(m), 1e-300, 0)
            out = update_cell(cell, X, 1)
            ref, ref_stats = em_step(m, X)
            assert out.model.n_components == ref.n_components
            assert np.allclose(out.model.weights, ref.weights, atol=1e-9, rtol=0)
            assert np.allclose(out.model.means, ref.means, atol=1e-9, rtol=0)
            assert np.allclose(out.model.covs, ref.covs, atol=1e-9, rtol=0)

    def test_drift_bounded(self):
        truth = Swgmm.single(Swnd((1.0, 1.2), np.diag([0.04, 0.01])))
        cell = build_cell(sample(truth, 500, 0))
        n = 100
        sd = np.sqrt(np.diag(cell.model.covs[0]))
        inside = 0
        for trial in range(50):
            X = sample(cell.model, n, 1000 + trial)
            out = update_cell(cell, X, 1)
            dt = oracles.ang_dist(out.model.means[0, 0], cell.model.means[0, 0])
            dr = abs(out.model.means[0, 1] - cell.model.means[0, 1])
            inside += dt <= 3 * sd[0] / math.sqrt(n) and dr <= 3 * sd[1] / math.sqrt(n)
        assert inside >= 49

    @pytest.mark.parametrize("seed", range(3))
    def test_eight_direction_sequence(self, seed):
        rng = np.random.default_rng(seed)
        cell = build_cell(heading_batch(rng, 0.0))
        for k in range(1, 8):
            cell = update_cell(cell, heading_batch(rng, k * math.pi / 4), k)
            m = cell.model
            assert oracles.ang_dist(m.means[m.dominant(), 0], k * math.pi / 4) < math.radians(15)
            prev = [w for w, t in zip(m.weights, m.means[:, 0]) if oracles.ang_dist(t, (k - 1) * math.pi / 4) < math.radians(15)]
            assert max(prev, default=0) > 0.05

    def test_forgets_old_direction(self):
        rng = np.random.default_rng(7)
        cell = build_cell(heading_batch(rng, 0.5))
        for k in range(1, 9):
            cell = update_cell(cell, heading_batch(rng, 0.5 + math.pi), k)
            if k >= 5:
                near_b = sum(w for w, t in zip(cell.model.weights, cell.model.means[:, 0]) if oracles.ang_dist(t, 0.5 + math.pi) < math.pi / 4)
                near_a = sum(w for w, t in zip(cell.model.weights, cell.model.means[:, 0]) if oracles.ang_dist(t, 0.5) < math.pi / 4)
                assert near_b > near_a

    def test_empty_batch_leaves_cell(self):
        cell = build_cell(model_batch(1)[1])
        assert update_cell(cell, np.zeros((0, 2)), 4) is cell

    def test_counters(self):
        m, X = model_batch(2)
        cell = build_cell(X, iteration=1)
        out = update_cell(cell, X[:50], 2, UpdateConfig(decay_lambda=0.25))
        assert out.n_ind == pytest.approx(0.25 * cell.n_ind + 50)
        assert out.last_update_iter == 2

    @given(st.integers(0, 10_000), st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_invariants_after_update(self, s1, s2, lam):
        _, X = model_batch(s1)
        _, Y = model_batch(s2, 80)
        out = update_cell(build_cell(X), Y, 1, UpdateConfig(decay_lambda=lam))
        m = out.model
        assert abs(m.weights.sum() - 1) < 1e-9
        assert np.allclose(m.covs, np.swapaxes(m.covs, 1, 2))
        assert np.linalg.eigvalsh(m.covs).min() > 0
        assert len(out.stats) == m.n_components

    @settings(max_examples=15)
    @given(st.integers(0, 10_000))
    def test_batched_matches_single(self, seed):
        rng = np.random.default_rng(seed)
        cells, batches = [], []
        for i in range(5):
            _, X = model_batch(seed + i)
            cells.append(build_cell(X))
            if i == 0:
                batches.append(np.zeros((0, 2)))
            elif i % 2:
                batches.append(heading_batch(rng, float(rng.uniform(0, 2 * math.pi)), int(rng.integers(1, 80))))
            else:
                batches.append(model_batch(seed + 50 + i, int(rng.integers(1, 80)))[1])
        cfg = UpdateConfig(decay_lambda=0.4)
        for cell, X, got in zip(cells, batches, update_cells(cells, batches, 3, cfg)):
            ref = update_cell(cell, X, 3, cfg)
            assert got.model.n_components == ref.model.n_components
            for a, b in ((got.model.weights, ref.model.weights), (got.model.means, ref.model.means),
                         (got.model.covs, ref.model.covs), (got.stats.s3, ref.stats.s3)):
                assert np.allclose(a, b, atol=1e-10, rtol=0)
            assert got.n_ind == ref.n_ind and got.last_update_iter == ref.last_update_iter


def test_update_config_validation():
    with pytest.raises(ValueError):
        UpdateConfig(decay_lambda=1.0)
    with pytest.raises(ValueError):
        UpdateConfig(eta_thres=0.0)
    assert replace(UpdateConfig(), decay_lambda=0.2).eta_thres == 0.1
