"""Tests for the sliding-window GP residual learner."""

import sys
sys.path.insert(0, ".")

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.gp_residual import (
    GpHyperparams,
    GpResidual,
    GpWindow,
    PriorResidual,
    ResidualTargetBuilder,
    dense_predict,
    features,
    kernel,
    observe,
    predict,
    residual_covariance,
)
from core.models import POS, VEL, state_vector


def _make_window(n=50, capacity=50, seed=0):
    rng = np.random.default_rng(seed)
    window = GpWindow(capacity)
    for _ in range(n):
        observe(window, rng.uniform(-1, 1, 5), rng.normal(0.0, 0.2, 3))
    return window


# ─── Kernel ─────────────────────────────────────────────────────


class TestKernel:
    def test_self_similarity(self):
        hp = GpHyperparams(sigma_f=0.3, length_scale=1.0)
        assert kernel(np.zeros(5), np.zeros(5), hp) == pytest.approx(0.09)

    def test_one_length_scale_apart(self):
        hp = GpHyperparams(sigma_f=1.0, length_scale=2.0)
        a = np.zeros(5)
        b = np.array([2.0, 0.0, 0.0, 0.0, 0.0])
        assert kernel(a, b, hp) == pytest.approx(np.exp(-0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kernel(np.zeros(5), np.zeros(4), GpHyperparams())

    def test_hyperparams_validate(self):
        assert dict(GpHyperparams(length_scale=0.0).validate()) == {"length_scale": "must be > 0"}


# ─── Window ─────────────────────────────────────────────────────


class TestGpWindow:
    def test_fifo_eviction(self):
        window = GpWindow(3)
        for i in range(5):
            observe(window, np.full(5, float(i)), np.zeros(3))
        assert len(window) == 3
        assert_allclose(window.X[0], np.full(5, 2.0))

    def test_zero_capacity_rejected(self):
        with pytest.raises(ValueError):
            GpWindow(0)


class TestPredict:
    def test_empty_window_is_prior(self):
        hp = GpHyperparams()
        pred = predict(GpWindow(10), hp, np.zeros(5))
        assert_allclose(pred.mean, np.zeros(3))
        assert pred.variance == pytest.approx(hp.prior_variance)
        assert not pred.degraded

    def test_matches_dense_solve(self):
        hp = GpHyperparams()
        window = _make_window()
        rng = np.random.default_rng(5)
        for _ in range(20):
            q = rng.uniform(-1, 1, 5)
            fast = predict(window, hp, q)
            ref = dense_predict(np.array(window.X), np.array(window.Y), hp, q)
            assert np.max(np.abs(fast.mean - ref.mean)) < 1e-10
            assert abs(fast.variance - ref.variance) < 1e-10

    def test_far_query_reverts_to_prior(self):
        hp = GpHyperparams()
        pred = predict(_make_window(), hp, np.full(5, 100.0))
        assert np.max(np.abs(pred.mean)) < 1e-12
        assert pred.variance == pytest.approx(hp.prior_variance)

    def test_variance_shrinks_near_data(self):
        hp = GpHyperparams()
        window = _make_window()
        pred = predict(window, hp, window.X[-1])
        assert pred.variance < hp.sigma_n**2 * 2

    def test_variance_bounded(self):
        hp = GpHyperparams()
        window = _make_window()
        rng = np.random.default_rng(6)
        for _ in range(50):
            v = predict(window, hp, rng.uniform(-3, 3, 5)).variance
            assert 0.0 <= v <= hp.prior_variance

    def test_ill_conditioned_gram_falls_back_to_prior(self):
        hp = GpHyperparams(sigma_f=1.0, sigma_n=1e-9)
        window = GpWindow(10)
        for _ in range(5):
            observe(window, np.zeros(5), np.ones(3))
        pred = predict(window, hp, np.zeros(5))
        assert pred.degraded
        assert_allclose(pred.mean, np.zeros(3))
        assert pred.variance == pytest.approx(1.0)

    def test_factor_refreshed_after_observe(self):
        hp = GpHyperparams()
        window = _make_window(n=10)
        q = np.zeros(5)
        before = predict(window, hp, q).mean
        observe(window, q, np.array([1.0, 1.0, 1.0]))
        assert not np.allclose(predict(window, hp, q).mean, before)


# ─── Features & Embedding ───────────────────────────────────────


class TestFeatures:
    def test_heading_and_scaled_velocity(self):
        x = state_vector(v_b=(1.5, 0.0, 0.3), theta=(0.0, 0.0, np.pi / 2))
        assert_allclose(features(x, 1.5), [0.0, 1.0, 1.0, 0.0, 0.2], atol=1e-12)

    def test_zero_scale_does_not_divide(self):
        x = state_vector(v_b=(2.0, 0.0, 0.0))
        assert features(x, 0.0)[2] == pytest.approx(2.0)

    def test_heading_scale_weights_heading_only(self):
        x = state_vector(v_b=(1.5, 0.0, 0.0), theta=(0.0, 0.0, np.pi))
        assert_allclose(features(x, 1.5, heading_scale=0.25), [-0.25, 0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_opposite_legs_stay_correlated(self):
        hp = GpHyperparams(sigma_f=1.0, length_scale=1.0)
        north = features(state_vector(v_b=(2.0, 0.0, 0.0)), 2.0, heading_scale=0.25)
        south = features(state_vector(v_b=(2.0, 0.0, 0.0), theta=(0.0, 0.0, np.pi)), 2.0, heading_scale=0.25)
        assert kernel(north, south, hp) == pytest.approx(np.exp(-0.125))


class TestResidualCovariance:
    def test_level_attitude(self):
        sigma = residual_covariance(0.04, np.zeros(3), 0.01, 10.0)
        assert_allclose(sigma[VEL, VEL], 0.04 * np.eye(3))
        assert_allclose(sigma[POS, POS], 0.04 * 0.01 * 10.0 * np.eye(3))
        assert sigma[6:, 6:].sum() == 0.0

    def test_rotation_preserves_trace(self):
        sigma = residual_covariance(np.array([0.01, 0.04, 0.0]), np.array([0.0, 0.0, 0.7]), 0.01, 10.0)
        assert np.trace(sigma[VEL, VEL]) == pytest.approx(0.05)
        assert_allclose(sigma, sigma.T)


# ─── Targets & Compensation ─────────────────────────────────────


class TestResidualTargetBuilder:
    def test_first_fix_has_no_target(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0)
        assert builder.add_fix(0, np.zeros(3), np.zeros(3)) is None

    def test_target_is_unmodeled_velocity(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0)
        builder.add_fix(0, np.zeros(3), np.zeros(3))
        target = builder.add_fix(20, np.array([30.0, 4.0, 0.0]), np.array([20.0, 0.0, 0.0]))
        assert_allclose(target, [0.5, 0.2, 0.0])

    def test_odometry_travels_with_each_fix(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0, max_baseline_s=100.0)
        builder.add_fix(500, np.array([100.0, 0.0, 0.0]), np.array([90.0, 0.0, 0.0]))
        target = builder.add_fix(520, np.array([130.0, 0.0, 0.0]), np.array([110.0, 0.0, 0.0]))
        assert_allclose(target, [0.5, 0.0, 0.0])

    def test_short_baseline_skipped(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0)
        builder.add_fix(0, np.zeros(3), np.zeros(3))
        assert builder.add_fix(5, np.ones(3), np.zeros(3)) is None

    def test_reference_beyond_band_skipped(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0, max_baseline_s=30.0)
        builder.add_fix(0, np.array([50.0, 0.0, 0.0]), np.zeros(3))
        builder.add_fix(25, np.zeros(3), np.zeros(3))
        target = builder.add_fix(45, np.array([4.0, 0.0, 0.0]), np.zeros(3))
        assert_allclose(target, [0.2, 0.0, 0.0])

    def test_out_of_order_fixes_kept_sorted(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0)
        for step in (20, 0, 10):
            builder.add_fix(step, np.zeros(3), np.zeros(3))
        assert [f.step for f in builder.fixes] == [0, 10, 20]

    def test_old_fixes_pruned_past_band(self):
        builder = ResidualTargetBuilder(dt=1.0, min_baseline_s=10.0, max_baseline_s=20.0)
        for step in (0, 15, 30):
            builder.add_fix(step, np.zeros(3), np.zeros(3))
        assert [f.step for f in builder.fixes] == [15, 30]

    def test_prune(self):
        builder = ResidualTargetBuilder(dt=1.0)
        for step in (0, 15, 30):
            builder.add_fix(step, np.zeros(3), np.zeros(3))
        builder.prune(10)
        assert [f.step for f in builder.fixes] == [15, 30]

    def test_fix_count_capped(self):
        builder = ResidualTargetBuilder(dt=1.0, max_baseline_s=1000.0, max_fixes=4)
        for step in range(10):
            builder.add_fix(step, np.zeros(3), np.zeros(3))
        assert [f.step for f in builder.fixes] == [6, 7, 8, 9]


class TestResidualModels:
    def test_prior_has_no_mean(self):
        mean, sigma = PriorResidual(GpHyperparams()).compensate(state_vector(), 0.01, 1)
        assert mean is None
        assert sigma[3, 3] == pytest.approx(0.09)

    def test_gp_mean_scaled_by_dt(self):
        gp = GpResidual(GpHyperparams(), window_size=10, speed_scale=1.5)
        x = state_vector(v_b=(1.5, 0.0, 0.0))
        for _ in range(5):
            gp.observe(features(x, 1.5), np.array([0.2, 0.1, 0.0]))
        mean, _ = gp.compensate(x, 0.01, 1)
        pred = predict(gp.window, gp.hp, features(x, 1.5))
        assert_allclose(mean, pred.mean * 0.01)

    def test_training_pair_waits_for_reference(self):
        gp = GpResidual(GpHyperparams(), speed_scale=2.0, heading_scale=0.25, dt=1.0, min_baseline_s=10.0)
        x = state_vector(v_b=(2.0, 0.0, 0.0))
        assert gp.training_pair(0, np.zeros(3), np.zeros(3), x) is None
        feature, target = gp.training_pair(20, np.array([42.0, 2.0, 0.0]), np.array([40.0, 0.0, 0.0]), x)
        assert_allclose(feature, gp.features(x))
        assert_allclose(target, [0.1, 0.1, 0.0])

    def test_trace_stride(self):
        gp = GpResidual(GpHyperparams(), trace_stride=10)
        for step in range(1, 31):
            gp.compensate(state_vector(), 0.01, step)
        assert [r.step for r in gp.trace] == [10, 20, 30]
        assert set(gp.trace[0].to_dict()) >= {"mean_n", "var_n", "degraded"}
