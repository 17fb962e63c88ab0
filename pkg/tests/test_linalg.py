"""Tests for the numerical helpers."""

import sys
sys.path.insert(0, ".")

import logging

import numpy as np
import pytest

from utils.linalg import chi2_gate, is_covariance, is_psd, is_symmetric, symmetrize, wrap_angle
from utils.logger import get_logger, set_level


class TestWrapAngle:
    def test_inside_interval_unchanged(self):
        assert wrap_angle(0.5) == pytest.approx(0.5)

    def test_pi_stays_pi(self):
        assert wrap_angle(np.pi) == pytest.approx(np.pi)

    def test_minus_pi_maps_to_pi(self):
        assert wrap_angle(-np.pi) == pytest.approx(np.pi)

    def test_full_turns_removed(self):
        assert wrap_angle(0.3 + 4 * np.pi) == pytest.approx(0.3)

    def test_array(self):
        out = wrap_angle(np.array([3 * np.pi / 2, -3 * np.pi / 2]))
        np.testing.assert_allclose(out, [-np.pi / 2, np.pi / 2])


class TestCovarianceChecks:
    def test_symmetrize(self):
        m = np.array([[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_allclose(symmetrize(m), [[1.0, 1.0], [1.0, 1.0]])

    def test_asymmetric_detected(self):
        assert not is_symmetric(np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_negative_eigenvalue_detected(self):
        assert not is_psd(np.diag([1.0, -0.5]))

    def test_zero_matrix_is_covariance(self):
        assert is_covariance(np.zeros((3, 3)))

    def test_non_finite_rejected(self):
        m = np.eye(2)
        m[0, 0] = np.nan
        assert not is_covariance(m)


class TestChi2Gate:
    def test_three_dof(self):
        assert chi2_gate(3, 0.999) == pytest.approx(16.266, abs=1e-3)

    def test_monotone_in_probability(self):
        assert chi2_gate(2, 0.99) < chi2_gate(2, 0.999)


class TestLogger:
    def test_child_of_package_root(self):
        assert get_logger("tskf").name == "tskfnav.tskf"

    def test_set_level_by_name(self):
        set_level("warning")
        assert get_logger().level == logging.WARNING
        set_level("INFO")

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            set_level("LOUD")
