"""Tests for the circular state buffer."""

import sys
sys.path.insert(0, ".")

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.errors import ContractViolationError, NotRetainedError
from core.state_buffer import (
    BufferEntry,
    CircularBuffer,
    lookup,
    push,
    required_capacity,
    stm_product,
)


def _make_entry(step, dim=3, F=None):
    return BufferEntry(
        step=step,
        x_pred=np.full(dim, float(step)),
        P_pred=np.eye(dim) * (step + 1),
        F=np.eye(dim) if F is None else F,
        Q_eff=np.eye(dim) * 0.01,
    )


def _make_random_buffer(n, capacity, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    buf = CircularBuffer(capacity, dim)
    for k in range(n):
        push(buf, _make_entry(k, dim, np.eye(dim) + 0.1 * rng.normal(size=(dim, dim))))
    return buf


class TestRequiredCapacity:
    def test_thirty_seconds_at_100hz(self):
        assert required_capacity(30.0, 0.01) == 3001

    def test_round_off_does_not_add_slot(self):
        assert required_capacity(0.3, 0.1) == 4


class TestPushLookup:
    def test_empty(self):
        buf = CircularBuffer(5, 3)
        assert len(buf) == 0
        assert buf.head is None
        assert buf.oldest is None
        assert lookup(buf, 0) is None

    def test_lookup_returns_copy(self):
        buf = CircularBuffer(5, 3)
        push(buf, _make_entry(0))
        entry = lookup(buf, 0)
        entry.x_pred[:] = 99.0
        assert_allclose(lookup(buf, 0).x_pred, np.zeros(3))

    def test_ring_overwrite(self):
        buf = CircularBuffer(5, 3)
        for k in range(8):
            push(buf, _make_entry(k))
        assert buf.oldest == 3
        assert buf.head == 7
        assert len(buf) == 5
        assert lookup(buf, 2) is None
        assert_allclose(lookup(buf, 3).x_pred, np.full(3, 3.0))
        assert_allclose(lookup(buf, 7).P_pred, np.eye(3) * 8)

    def test_future_step_not_retained(self):
        buf = CircularBuffer(5, 3)
        push(buf, _make_entry(0))
        assert lookup(buf, 1) is None

    def test_first_step_may_be_nonzero(self):
        buf = CircularBuffer(5, 3)
        push(buf, _make_entry(10))
        push(buf, _make_entry(11))
        assert buf.oldest == 10
        assert lookup(buf, 9) is None

    def test_non_consecutive_push(self):
        buf = CircularBuffer(5, 3)
        push(buf, _make_entry(0))
        with pytest.raises(ContractViolationError):
            push(buf, _make_entry(2))

    def test_zero_capacity(self):
        with pytest.raises(ValueError):
            CircularBuffer(0)


class TestStmProduct:
    def test_empty_range_is_identity(self):
        buf = _make_random_buffer(10, 20)
        assert_allclose(stm_product(buf, 4, 4), np.eye(4))

    def test_single_step_is_that_transition(self):
        buf = _make_random_buffer(10, 20)
        assert_allclose(stm_product(buf, 4, 5), lookup(buf, 5).F)

    def test_semigroup(self):
        buf = _make_random_buffer(30, 40)
        full = stm_product(buf, 3, 25)
        split = stm_product(buf, 12, 25) @ stm_product(buf, 3, 12)
        assert_allclose(full, split, rtol=1e-12, atol=1e-12)

    def test_window_order(self):
        buf = _make_random_buffer(10, 20)
        Fs, Qs = buf.window(2, 5)
        assert len(Fs) == 3
        assert_allclose(Fs[0], lookup(buf, 3).F)
        assert_allclose(Fs[-1], lookup(buf, 5).F)
        assert Qs.shape == (3, 4, 4)

    def test_wraps_around_ring(self):
        buf = _make_random_buffer(50, 8)
        expected = lookup(buf, 49).F @ lookup(buf, 48).F @ lookup(buf, 47).F
        assert_allclose(stm_product(buf, 46, 49), expected)

    def test_evicted_start(self):
        buf = _make_random_buffer(50, 8)
        with pytest.raises(NotRetainedError) as exc:
            stm_product(buf, 10, 49)
        assert exc.value.step == 10

    def test_reversed_range(self):
        buf = _make_random_buffer(10, 20)
        with pytest.raises(ValueError):
            buf.window(5, 2)
