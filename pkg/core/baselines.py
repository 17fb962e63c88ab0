"""Comparison estimators: delay-ignorant EKF and UKF, and the augmented-state EKF."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from filterpy.kalman import MerweScaledSigmaPoints, UnscentedKalmanFilter
from scipy.linalg import LinAlgError, cholesky

from core.errors import DegenerateBearingError, ResourceExhaustedError
from core.estimator import Estimator, innovate, joseph_update, passes_gate
from core.models import KinematicModel
from utils.linalg import chi2_gate, symmetrize
from utils.logger import get_logger

log = get_logger("baselines")

SQRT_JITTER = 1e-9
BYTES_PER_FLOAT = 8


# ─── Shared Prediction ──────────────────────────────────────────


def _predict_moments(model, residual, x, P, u, dt):
    F = model.jacobian(x, u, dt)
    x_new = model.step(x, u, dt)
    Q = model.process_noise(x, u, dt)
    if residual is not None and isinstance(model, KinematicModel):
        shift, sigma = residual.compensate(x, dt, 0)
        if shift is not None:
            x_new[:3] += shift
        Q = Q + sigma
    return model.normalize(x_new), F, Q


# ─── Standard EKF ───────────────────────────────────────────────


class DelayIgnorantEkf(Estimator):
    """Applies every fix at the step it arrives, as if it were current."""

    name = "ekf"

    def __init__(self, model, measurement, x0, P0, dt, residual=None, gate_probability=None):
        super().__init__(model, measurement, x0, P0, dt)
        self.residual = residual
        self.gate_probability = gate_probability

    def step(self, u, dt: Optional[float] = None) -> None:
        dt = self.dt if dt is None else dt
        x_new, F, Q = _predict_moments(self.model, self.residual, self.x, self.P, u, dt)
        self.P = symmetrize(F @ self.P @ F.T + Q)
        self.x = x_new
        self.k += 1

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        R = pkt.noise_cov
        try:
            inn = innovate(self.measurement, self.x, self.P, pkt.payload, R)
        except (DegenerateBearingError, LinAlgError):
            self.stats.rejected += 1
            self.stats.degenerate += 1
            self._record(pkt, 0.0, float("nan"), False, "degenerate")
            return
        if not passes_gate(inn, self.gate_probability):
            self.stats.rejected += 1
            self.stats.gated += 1
            self._record(pkt, 0.0, inn.nis, False, "gated")
            return
        dx = inn.K @ inn.y
        self.x = self.model.normalize(self.x + dx)
        self.P = joseph_update(self.P, inn, R)
        self.stats.updates += 1
        self._record(pkt, float(np.linalg.norm(dx)), inn.nis, True)


# ─── Standard UKF ───────────────────────────────────────────────


@dataclass
class UtParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def validate(self) -> list[tuple[str, str]]:
        if not 0.0 < self.alpha <= 1.0:
            return [("alpha", "must be in (0, 1]")]
        return []

    def weights(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        points = MerweScaledSigmaPoints(n, alpha=self.alpha, beta=self.beta, kappa=self.kappa)
        return points.Wm, points.Wc


class DelayIgnorantUkf(Estimator):
    """Same delay handling as the EKF with sigma-point propagation."""

    name = "ukf"

    def __init__(self, model, measurement, x0, P0, dt, ut: UtParams | None = None,
                 residual=None, gate_probability=None):
        super().__init__(model, measurement, x0, P0, dt)
        self.residual = residual
        self.gate_probability = gate_probability
        self.ut = ut or UtParams()
        self._jitter_warned = False
        n = model.dim
        self.points = MerweScaledSigmaPoints(
            n, alpha=self.ut.alpha, beta=self.ut.beta, kappa=self.ut.kappa,
            sqrt_method=self._sqrt,
        )
        self.ukf = UnscentedKalmanFilter(
            dim_x=n,
            dim_z=measurement.dim,
            dt=dt,
            hx=measurement.measure,
            fx=self._fx,
            points=self.points,
            x_mean_fn=self._state_mean,
            z_mean_fn=self._measurement_mean,
            residual_x=model.difference,
            residual_z=measurement.residual,
        )
        self.ukf.x = self.x.copy()
        self.ukf.P = self.P.copy()
    def _sqrt(self, M: np.ndarray) -> np.ndarray:
        try:
            return cholesky(M)
        except LinAlgError:
            if not self._jitter_warned:
                log.warning("UKF covariance square root failed; re-conditioning with diagonal jitter")
                self._jitter_warned = True
            self.stats.flag("sqrt_jitter")
            return cholesky(symmetrize(M) + SQRT_JITTER * np.eye(M.shape[0]))

    def _fx(self, x, dt, u=None):
        return self.model.step(x, u, dt)

    def _state_mean(self, sigmas, Wm):
        ref = sigmas[0]
        return self.model.normalize(ref + sum(w * self.model.difference(s, ref) for w, s in zip(Wm, sigmas)))

    def _measurement_mean(self, sigmas, Wm):
        ref = sigmas[0]
        return ref + sum(w * self.measurement.residual(s, ref) for w, s in zip(Wm, sigmas))

    def step(self, u, dt: Optional[float] = None) -> None:
        dt = self.dt if dt is None else dt
        Q = self.model.process_noise(self.x, u, dt)
        shift = None
        if self.residual is not None and isinstance(self.model, KinematicModel):
            shift, sigma = self.residual.compensate(self.x, dt, self.k + 1)
            Q = Q + sigma
        self.ukf.Q = Q
        self.ukf.predict(dt=dt, u=u)
        if shift is not None:
            self.ukf.x[:3] += shift
        self.ukf.P = symmetrize(self.ukf.P)
        self.x, self.P = self.ukf.x.copy(), self.ukf.P.copy()
        self.k += 1

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        z = np.asarray(pkt.payload, dtype=float)
        try:
            # gate against the linearized innovation before touching the filter
            inn = innovate(self.measurement, self.x, self.P, z, pkt.noise_cov)
            if not passes_gate(inn, self.gate_probability):
                self.stats.rejected += 1
                self.stats.gated += 1
                self._record(pkt, 0.0, inn.nis, False, "gated")
                return
            x_before = self.ukf.x.copy()
            self.ukf.sigmas_f = self.points.sigma_points(self.ukf.x, self.ukf.P)
            self.ukf.update(z, R=pkt.noise_cov)
        except (DegenerateBearingError, LinAlgError):
            self.stats.rejected += 1
            self.stats.degenerate += 1
            self._record(pkt, 0.0, float("nan"), False, "degenerate")
            return
        self.ukf.x = self.model.normalize(self.ukf.x)
        self.ukf.P = symmetrize(self.ukf.P)
        dx = self.model.difference(self.ukf.x, x_before)
        self.x, self.P = self.ukf.x.copy(), self.ukf.P.copy()
        self.stats.updates += 1
        self._record(pkt, float(np.linalg.norm(dx)), inn.nis, True)


# ─── Augmented-State EKF ────────────────────────────────────────


def augmented_dimension(dim: int, clone_dim: int, max_delay: float, dt: float, lag_stride: int) -> int:
    """Head state plus one clone per retained lag, generation step included."""
    lags = int(np.ceil(round(max_delay / (dt * lag_stride), 9))) + 1
    return dim + lags * clone_dim


class AugmentedStateEkf(Estimator):
    """EKF over the head state plus clones of its measured components at past steps.

    Clones live in a ring of slots; a delayed fix updates the clone of its
    generation step and the cross-covariance carries the correction to the head.
    """

    name = "aug_ekf"

    def __init__(self, model, measurement, x0, P0, dt, max_delay: float,
                 lag_stride: int = 1, memory_budget_mb: float = 512.0,
                 residual=None, gate_probability=0.999):
        super().__init__(model, measurement, x0, P0, dt)
        self.residual = residual
        self.gate_probability = gate_probability
        self.lag_stride = lag_stride
        self.n = model.dim
        self.idx = np.asarray(measurement.state_indices, dtype=int)
        self.s = len(self.idx)
        self.num_slots = int(np.ceil(round(max_delay / (dt * lag_stride), 9))) + 1
        total = self.n + self.num_slots * self.s

        required = total * total * BYTES_PER_FLOAT
        budget = int(memory_budget_mb * 2**20)
        if required > budget:
            log.warning(f"Aug-EKF needs a {total}x{total} covariance; over budget")
            raise ResourceExhaustedError(required, budget, what=f"{total}x{total} augmented covariance")

        self.dim_aug = total
        self.xa = np.zeros(total)
        self.xa[:self.n] = self.x
        self.Pa = np.zeros((total, total))
        self.Pa[:self.n, :self.n] = self.P
        self.slot_steps = np.full(self.num_slots, -1, dtype=int)
        self._clone(0)
        log.debug(f"Aug-EKF ready: {self.num_slots} lag slots, dimension {total}")

    def _cols(self, slot: int) -> np.ndarray:
        start = self.n + slot * self.s
        return np.arange(start, start + self.s)

    def _clone(self, step: int) -> None:
        slot = (step // self.lag_stride) % self.num_slots
        cols = self._cols(slot)
        row = self.Pa[self.idx, :].copy()
        self.Pa[cols, :] = row
        self.Pa[:, cols] = row.T
        self.Pa[np.ix_(cols, cols)] = self.Pa[np.ix_(self.idx, self.idx)]
        self.xa[cols] = self.xa[self.idx]
        self.slot_steps[slot] = step

    def step(self, u, dt: Optional[float] = None) -> None:
        dt = self.dt if dt is None else dt
        n = self.n
        x_head = self.xa[:n]
        x_new, F, Q = _predict_moments(self.model, self.residual, x_head, self.Pa[:n, :n], u, dt)

        rows = F @ self.Pa[:n, :]
        head_block = rows[:, :n] @ F.T + Q
        self.Pa[:n, :] = rows
        self.Pa[:, :n] = rows.T
        self.Pa[:n, :n] = symmetrize(head_block)
        self.xa[:n] = x_new
        self.k += 1
        if self.k % self.lag_stride == 0:
            self._clone(self.k)
        self.x = x_new.copy()
        self.P = self.Pa[:n, :n].copy()

    def _slot_for(self, gen_step: int) -> Optional[int]:
        grid = gen_step - gen_step % self.lag_stride
        slot = (grid // self.lag_stride) % self.num_slots
        if self.slot_steps[slot] != grid:
            return None
        return slot

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        g = pkt.gen_step
        slot = self._slot_for(g) if g <= self.k else None
        if slot is None:
            self.stats.rejected += 1
            self.stats.not_retained += 1
            self._record(pkt, 0.0, float("nan"), False, "not_retained")
            return

        cols = self._cols(slot)
        x_lag = np.zeros(self.n)
        x_lag[self.idx] = self.xa[cols]
        R = pkt.noise_cov
        try:
            H_full = self.measurement.jacobian(x_lag)
            y = self.measurement.residual(np.asarray(pkt.payload, dtype=float), self.measurement.measure(x_lag))
        except DegenerateBearingError:
            self.stats.rejected += 1
            self.stats.degenerate += 1
            self._record(pkt, 0.0, float("nan"), False, "degenerate")
            return

        Hc = H_full[:, self.idx]
        PHt = self.Pa[:, cols] @ Hc.T
        S = symmetrize(Hc @ PHt[cols, :] + R)
        try:
            S_inv = np.linalg.inv(S)
        except LinAlgError:
            self.stats.rejected += 1
            self._record(pkt, 0.0, float("nan"), False, "singular")
            return
        nis = float(y @ S_inv @ y)
        if self.gate_probability is not None and self.gate_probability < 1.0:
            if nis > chi2_gate(len(y), self.gate_probability):
                self.stats.rejected += 1
                self.stats.gated += 1
                self._record(pkt, 0.0, nis, False, "gated")
                return

        K = PHt @ S_inv
        dx = K @ y
        self.xa += dx
        self.xa[:self.n] = self.model.normalize(self.xa[:self.n])
        self.Pa -= K @ S @ K.T
        self.Pa = symmetrize(self.Pa)
        self.x = self.xa[:self.n].copy()
        self.P = self.Pa[:self.n, :self.n].copy()
        self.stats.updates += 1
        self._record(pkt, float(np.linalg.norm(dx[:self.n])), nis, True)


# ─── Functional Surface ─────────────────────────────────────────


def _step_with_packet(est: Estimator, u, dt, maybe_packet) -> Estimator:
    est.step(u, dt)
    if maybe_packet is not None:
        est.on_packet(maybe_packet)
    return est


def ekf_ignorant_step(est: DelayIgnorantEkf, u, dt, maybe_packet=None) -> DelayIgnorantEkf:
    return _step_with_packet(est, u, dt, maybe_packet)


def ukf_ignorant_step(est: DelayIgnorantUkf, u, dt, maybe_packet=None) -> DelayIgnorantUkf:
    return _step_with_packet(est, u, dt, maybe_packet)


def augekf_step(est: AugmentedStateEkf, u, dt, maybe_packet=None) -> AugmentedStateEkf:
    return _step_with_packet(est, u, dt, maybe_packet)
