"""Tests for the delay-ignorant filters and the augmented-state EKF."""

import sys
sys.path.insert(0, ".")

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.baselines import (
    AugmentedStateEkf,
    DelayIgnorantEkf,
    DelayIgnorantUkf,
    UtParams,
    augekf_step,
    augmented_dimension,
    ekf_ignorant_step,
    ukf_ignorant_step,
)
from core.channel import AcousticPacket
from core.errors import ResourceExhaustedError
from core.models import (
    KinematicModel,
    LinearMeasurement,
    LinearModel,
    PositionMeasurement,
    RangeBearingMeasurement,
    state_vector,
)
from core.oracle import check_aug_ekf, check_ukf_ekf, make_linear_system


def _make_packet(gen_step, z, R) -> AcousticPacket:
    return AcousticPacket(gen_step, float(gen_step), np.asarray(z, dtype=float), R, float(gen_step))


# ─── Delay-Ignorant EKF ─────────────────────────────────────────


class TestDelayIgnorantEkf:
    def test_prediction_is_linear_kalman(self):
        sys_ = make_linear_system(3)
        ekf = DelayIgnorantEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0)
        ekf.step(None)
        F, Q = sys_.model.F, sys_.model.Q
        assert_allclose(ekf.x, F @ sys_.x0)
        assert_allclose(ekf.P, F @ sys_.P0 @ F.T + Q, atol=1e-15)
        assert ekf.k == 1

    def test_applies_stale_fix_as_current(self):
        sys_ = make_linear_system(3)
        ekf = DelayIgnorantEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0)
        for _ in range(10):
            ekf.step(None)
        ekf.on_packet(_make_packet(2, ekf.x, sys_.R))
        assert ekf.stats.updates == 1
        assert ekf.events[-1].delay_steps == 8

    def test_degenerate_bearing_rejected(self):
        ekf = DelayIgnorantEkf(KinematicModel(), RangeBearingMeasurement(), state_vector(), np.eye(9), 0.01)
        ekf.on_packet(_make_packet(0, np.array([5.0, 0.1, 0.0]), np.eye(3)))
        assert ekf.stats.degenerate == 1
        assert ekf.events[-1].reason == "degenerate"

    def test_gate(self):
        sys_ = make_linear_system(3)
        ekf = DelayIgnorantEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0, gate_probability=0.999)
        ekf.on_packet(_make_packet(0, np.full(3, 1e3), sys_.R))
        assert ekf.stats.gated == 1
        assert_allclose(ekf.x, sys_.x0)


# ─── Delay-Ignorant UKF ─────────────────────────────────────────


class TestUtParams:
    @pytest.mark.parametrize("alpha", [1e-3, 0.5, 1.0])
    def test_mean_weights_sum_to_one(self, alpha):
        Wm, _ = UtParams(alpha=alpha).weights(9)
        assert Wm.sum() == pytest.approx(1.0)
        assert len(Wm) == 19

    def test_covariance_weight_offset(self):
        p = UtParams(alpha=0.5, beta=2.0)
        Wm, Wc = p.weights(4)
        assert Wc[0] - Wm[0] == pytest.approx(1 - 0.25 + 2.0)

    def test_alpha_range(self):
        assert UtParams(alpha=0.0).validate() == [("alpha", "must be in (0, 1]")]
        assert UtParams().validate() == []


class TestDelayIgnorantUkf:
    def test_linear_system_matches_ekf(self):
        assert check_ukf_ekf().passed

    def test_square_root_jitter_flagged(self):
        model = LinearModel(np.eye(3), np.zeros((3, 3)))
        ukf = DelayIgnorantUkf(model, LinearMeasurement(np.eye(3)), np.zeros(3), np.diag([1.0, 1.0, 0.0]), 1.0,
                               ut=UtParams(alpha=0.5))
        ukf.step(None)
        assert "sqrt_jitter" in ukf.stats.flags
        assert np.all(np.isfinite(ukf.x))

    def test_bearing_mean_wraps(self):
        ukf = DelayIgnorantUkf(KinematicModel(), RangeBearingMeasurement(), state_vector(p_n=(-50.0, 0.5, 10.0)),
                               np.eye(9), 0.01, ut=UtParams(alpha=0.5))
        z = np.array([np.hypot(50.0, 10.0), np.pi - 0.01, 10.0])
        ukf.on_packet(_make_packet(0, z, np.diag([1.0, 0.01**2, 0.01])))
        assert ukf.stats.updates == 1
        assert abs(ukf.x[1]) < 5.0


# ─── Augmented-State EKF ────────────────────────────────────────


class TestAugmentedDimension:
    def test_thirty_seconds_position_clones(self):
        assert augmented_dimension(9, 3, 30.0, 0.01, 1) == 9012

    def test_twenty_seconds_position_clones(self):
        assert augmented_dimension(9, 3, 20.0, 0.01, 1) == 6012

    def test_stride_decimates(self):
        assert augmented_dimension(9, 3, 30.0, 0.01, 10) == 9 + 301 * 3


class TestAugmentedStateEkf:
    def test_over_budget_at_thirty_seconds(self):
        with pytest.raises(ResourceExhaustedError) as exc:
            AugmentedStateEkf(KinematicModel(), PositionMeasurement(), state_vector(), np.eye(9), 0.01,
                              max_delay=30.0, memory_budget_mb=512.0)
        assert exc.value.required_bytes == 9012 * 9012 * 8

    def test_matches_refilter(self):
        assert check_aug_ekf().passed

    def test_zero_delay_equals_ekf(self):
        sys_ = make_linear_system(3, seed=1)
        ekf = DelayIgnorantEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0)
        aug = AugmentedStateEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0, max_delay=5.0,
                                gate_probability=None)
        rng = np.random.default_rng(2)
        for k in range(1, 21):
            ekf.step(None)
            aug.step(None)
            if k % 4 == 0:
                pkt = _make_packet(k, rng.normal(size=3), sys_.R)
                ekf.on_packet(pkt)
                aug.on_packet(pkt)
        assert_allclose(aug.x, ekf.x, rtol=1e-9, atol=1e-12)
        assert_allclose(aug.P, ekf.P, rtol=1e-9, atol=1e-12)

    def test_fix_older_than_window_rejected(self):
        sys_ = make_linear_system(3)
        aug = AugmentedStateEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0, max_delay=5.0)
        for _ in range(20):
            aug.step(None)
        aug.on_packet(_make_packet(10, np.zeros(3), sys_.R))
        assert aug.stats.not_retained == 1

    def test_stride_uses_nearest_earlier_clone(self):
        sys_ = make_linear_system(3)
        aug = AugmentedStateEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0, max_delay=10.0,
                                lag_stride=5, gate_probability=None)
        for _ in range(12):
            aug.step(None)
        assert aug._slot_for(8) == aug._slot_for(5)
        aug.on_packet(_make_packet(8, np.zeros(3), sys_.R))
        assert aug.stats.updates == 1

    def test_covariance_symmetric_after_updates(self):
        sys_ = make_linear_system(3)
        aug = AugmentedStateEkf(sys_.model, sys_.measurement, sys_.x0, sys_.P0, 1.0, max_delay=8.0,
                                gate_probability=None)
        rng = np.random.default_rng(5)
        for k in range(1, 41):
            aug.step(None)
            if k % 3 == 0:
                aug.on_packet(_make_packet(max(0, k - 6), rng.normal(size=3), sys_.R))
        assert_allclose(aug.Pa, aug.Pa.T)
        assert np.min(np.linalg.eigvalsh(aug.Pa)) > -1e-9


# ─── Functional Surface ─────────────────────────────────────────


class TestStepFunctions:
    @pytest.mark.parametrize("factory,step_fn", [
        (lambda s: DelayIgnorantEkf(s.model, s.measurement, s.x0, s.P0, 1.0), ekf_ignorant_step),
        (lambda s: DelayIgnorantUkf(s.model, s.measurement, s.x0, s.P0, 1.0, ut=UtParams(alpha=0.5)),
         ukf_ignorant_step),
        (lambda s: AugmentedStateEkf(s.model, s.measurement, s.x0, s.P0, 1.0, max_delay=3.0), augekf_step),
    ])
    def test_step_with_and_without_packet(self, factory, step_fn):
        sys_ = make_linear_system(3)
        est = factory(sys_)
        est = step_fn(est, None, 1.0)
        est = step_fn(est, None, 1.0, _make_packet(2, sys_.measurement.measure(est.x), sys_.R))
        assert est.k == 2
        assert est.stats.updates == 1
