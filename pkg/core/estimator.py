"""Common estimator surface and the Kalman update pieces every filter shares."""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from utils.linalg import chi2_gate, symmetrize


@dataclass
class FilterStats:
    """Per-estimator counters reported with every run."""
    updates: int = 0
    rejected: int = 0
    gated: int = 0
    not_retained: int = 0
    degenerate: int = 0
    flags: list = field(default_factory=list)

    def flag(self, message: str) -> None:
        if message not in self.flags:
            self.flags.append(message)

    def to_dict(self) -> dict:
        return {
            "updates": self.updates,
            "rejected": self.rejected,
            "gated": self.gated,
            "not_retained": self.not_retained,
            "degenerate": self.degenerate,
            "flags": ";".join(self.flags),
        }


@dataclass
class UpdateEvent:
    """One delayed-measurement decision, accepted or not."""
    gen_step: int
    recv_step: int
    correction_norm: float
    nis: float
    accepted: bool
    reason: str = ""

    @property
    def delay_steps(self) -> int:
        return self.recv_step - self.gen_step

    def to_dict(self) -> dict:
        return {
            "gen_step": self.gen_step,
            "recv_step": self.recv_step,
            "d": self.delay_steps,
            "dx_norm": self.correction_norm,
            "nis": self.nis,
            "accepted": self.accepted,
            "reason": self.reason,
        }


class Innovation(NamedTuple):
    H: np.ndarray
    y: np.ndarray
    S: np.ndarray
    K: np.ndarray
    nis: float


def innovate(measurement, x: np.ndarray, P: np.ndarray, z: np.ndarray, R: np.ndarray) -> Innovation:
    """Innovation, its covariance and the gain K = P H^T S^-1 via a Cholesky solve."""
    H = measurement.jacobian(x)
    y = measurement.residual(np.asarray(z, dtype=float), measurement.measure(x))
    S = symmetrize(H @ P @ H.T + R)
    chol = cho_factor(S, lower=True)
    K = cho_solve(chol, H @ P).T
    nis = float(y @ cho_solve(chol, y))
    return Innovation(H, y, S, K, nis)


def joseph_update(P: np.ndarray, inn: Innovation, R: np.ndarray) -> np.ndarray:
    """(I - KH) P (I - KH)^T + K R K^T, symmetrized."""
    A = np.eye(P.shape[0]) - inn.K @ inn.H
    return symmetrize(A @ P @ A.T + inn.K @ R @ inn.K.T)


def passes_gate(inn: Innovation, probability: Optional[float]) -> bool:
    if probability is None or probability >= 1.0:
        return True
    return inn.nis <= chi2_gate(inn.y.shape[0], probability)


class Estimator:
    """Surface the harness drives: one fast step per tick, packets as they mature."""

    name = "estimator"

    def __init__(self, model, measurement, x0: np.ndarray, P0: np.ndarray, dt: float):
        self.model = model
        self.measurement = measurement
        self.dt = dt
        self.x = np.asarray(x0, dtype=float).copy()
        self.P = np.asarray(P0, dtype=float).copy()
        self.k = 0
        self.stats = FilterStats()
        self.events: list[UpdateEvent] = []

    def step(self, u, dt: Optional[float] = None) -> None:
        raise NotImplementedError

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        raise NotImplementedError

    def estimate(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.copy(), self.P.copy()

    def close(self) -> None:
        """Release background resources, if any."""

    def _record(self, pkt, correction_norm: float, nis: float, accepted: bool, reason: str = "") -> None:
        self.events.append(UpdateEvent(pkt.gen_step, self.k, correction_norm, nis, accepted, reason))
