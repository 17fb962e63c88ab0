"""Fixed-capacity ring of per-step filter snapshots.

Entry k holds the prediction for step k together with the transition F_k
that produced it and the effective process noise of that step, so the
product F_b ... F_{a+1} maps a perturbation at step a to step b.
"""

import math
from dataclasses import dataclass
from threading import Lock
from typing import Optional

import numpy as np

from core.errors import ContractViolationError, NotRetainedError


def required_capacity(t_max: float, dt: float) -> int:
    """Entries needed so a fix generated t_max seconds ago is still held."""
    return int(math.ceil(round(t_max / dt, 9))) + 1


@dataclass
class BufferEntry:
    step: int
    x_pred: np.ndarray
    P_pred: np.ndarray
    F: np.ndarray
    Q_eff: np.ndarray
    odom: np.ndarray | None = None     # cumulative analytic NED displacement


class CircularBuffer:
    """Ring of N_max preallocated slots indexed by step mod N_max.

    One writer pushes; readers copy what they need under the lock and do the
    arithmetic outside it.
    """

    def __init__(self, capacity: int, dim: int = 9, odom_dim: int = 3):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._x = np.zeros((capacity, dim))
        self._P = np.zeros((capacity, dim, dim))
        self._F = np.zeros((capacity, dim, dim))
        self._Q = np.zeros((capacity, dim, dim))
        self._odom = np.zeros((capacity, odom_dim))
        self._first: Optional[int] = None
        self._head: Optional[int] = None
        self._lock = Lock()

    # ── Publication ──

    def push(self, entry: BufferEntry) -> None:
        with self._lock:
            if self._head is not None and entry.step != self._head + 1:
                raise ContractViolationError(
                    f"Non-consecutive push: expected step {self._head + 1}, got {entry.step}"
                )
            slot = entry.step % self.capacity
            self._x[slot] = entry.x_pred
            self._P[slot] = entry.P_pred
            self._F[slot] = entry.F
            self._Q[slot] = entry.Q_eff
            if entry.odom is not None:
                self._odom[slot] = entry.odom
            if self._first is None:
                self._first = entry.step
            self._head = entry.step

    @property
    def head(self) -> Optional[int]:
        return self._head

    @property
    def oldest(self) -> Optional[int]:
        if self._head is None:
            return None
        return max(self._first, self._head - self.capacity + 1)

    def __len__(self) -> int:
        if self._head is None:
            return 0
        return self._head - self.oldest + 1

    def retains(self, step: int) -> bool:
        head = self._head
        if head is None:
            return False
        return max(self._first, head - self.capacity + 1) <= step <= head

    # ── Retrieval ──

    def lookup(self, step: int) -> Optional[BufferEntry]:
        """Entry for `step`, or None when it was evicted or not yet pushed."""
        with self._lock:
            if not self.retains(step):
                return None
            slot = step % self.capacity
            return BufferEntry(
                step=step,
                x_pred=self._x[slot].copy(),
                P_pred=self._P[slot].copy(),
                F=self._F[slot].copy(),
                Q_eff=self._Q[slot].copy(),
                odom=self._odom[slot].copy(),
            )

    def window(self, from_step: int, to_step: int) -> tuple[np.ndarray, np.ndarray]:
        """Copies of F and Q_eff for steps from_step+1 .. to_step, oldest first."""
        if to_step < from_step:
            raise ValueError(f"Window end {to_step} precedes start {from_step}")
        with self._lock:
            for step in (from_step, to_step):
                if not self.retains(step):
                    raise NotRetainedError(step)
            idx = np.arange(from_step + 1, to_step + 1) % self.capacity
            return self._F[idx], self._Q[idx]

    def stm_product(self, from_step: int, to_step: int) -> np.ndarray:
        """Phi(to, from) = F_to ... F_{from+1}; identity for an empty range."""
        Fs, _ = self.window(from_step, to_step)
        phi = np.eye(self.dim)
        for F in Fs:
            phi = F @ phi
        return phi


# ─── Functional Aliases ─────────────────────────────────────────


def push(buf: CircularBuffer, entry: BufferEntry) -> None:
    buf.push(entry)


def lookup(buf: CircularBuffer, step: int) -> Optional[BufferEntry]:
    return buf.lookup(step)


def stm_product(buf: CircularBuffer, from_step: int, to_step: int) -> np.ndarray:
    return buf.stm_product(from_step, to_step)
