"""Asynchronous two-speed Kalman filter.

The fast context predicts every IMU step with the GP-compensated model and
pushes a snapshot into the state buffer. When a delayed fix matures the slow
context updates the buffered estimate at its generation step and projects the
correction to the present through the product of buffered transitions.
"""

import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError

from core.errors import DegenerateBearingError, NotRetainedError
from core.estimator import Estimator, FilterStats, innovate, joseph_update, passes_gate
from core.gp_residual import GpResidual
from core.models import POS, KinematicModel
from core.state_buffer import BufferEntry, CircularBuffer, required_capacity
from utils.linalg import symmetrize
from utils.logger import get_logger

log = get_logger("tskf")

INNOVATION_BASES = ("corrected", "buffered")


# ─── Configuration & State ──────────────────────────────────────


@dataclass
class TskfConfig:
    dt: float = 0.01
    max_delay: float = 30.0                 # s, sizes the buffer
    buffer_capacity: Optional[int] = None   # overrides the max_delay sizing
    mean_only_projection: bool = False
    innovation_base: str = "corrected"
    use_gp: bool = True
    gate_probability: Optional[float] = 0.999

    @property
    def capacity(self) -> int:
        if self.buffer_capacity is not None:
            return self.buffer_capacity
        return required_capacity(self.max_delay, self.dt)

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        if not self.dt > 0:
            problems.append(("dt", "must be > 0"))
        if not self.max_delay >= 0:
            problems.append(("max_delay", "must be >= 0"))
        if self.buffer_capacity is not None and self.buffer_capacity < 1:
            problems.append(("buffer_capacity", "must be >= 1"))
        if self.innovation_base not in INNOVATION_BASES:
            problems.append(("innovation_base", f"must be one of {INNOVATION_BASES}"))
        if self.gate_probability is not None and not 0.0 < self.gate_probability <= 1.0:
            problems.append(("gate_probability", "must be in (0, 1]"))
        return problems


@dataclass
class TskfState:
    x_fast: np.ndarray
    P_fast: np.ndarray
    buffer: CircularBuffer
    gp: object
    step: int
    stats: FilterStats


@dataclass
class UpdateRecord:
    """Internals of the last accepted delayed update."""
    gen_step: int
    applied_step: int
    H: np.ndarray
    S: np.ndarray
    K: np.ndarray
    nis: float
    P_prior: np.ndarray
    P_post: np.ndarray
    dx_hist: np.ndarray
    dx_now: np.ndarray


@dataclass
class _Correction:
    pkt: object
    record: UpdateRecord
    P_now: Optional[np.ndarray]
    hist_state: np.ndarray
    odom: np.ndarray
    path: Optional[list] = None


@dataclass
class _LedgerEntry:
    gen_step: int
    applied_step: int
    path: np.ndarray           # row i = correction projected to gen_step + i


# ─── Covariance Fast-Forward ────────────────────────────────────


def covariance_fast_forward(buf: CircularBuffer, P_new: np.ndarray, from_step: int, to_step: int) -> np.ndarray:
    """Phi P_new Phi^T + sum_i Phi(to, i) Q_i Phi(to, i)^T in one backward pass."""
    Fs, Qs = buf.window(from_step, to_step)
    M = np.eye(P_new.shape[0])
    S = np.zeros_like(P_new)
    for F, Q in zip(Fs[::-1], Qs[::-1]):
        S += M @ Q @ M.T
        M = M @ F
    return symmetrize(M @ P_new @ M.T + S)


# ─── Filter ─────────────────────────────────────────────────────


class TwoSpeedFilter(Estimator):
    """Deterministic two-speed filter; both contexts run on the caller's thread."""

    name = "tskf"

    def __init__(self, model, measurement, x0, P0, config: TskfConfig, residual=None):
        super().__init__(model, measurement, x0, P0, config.dt)
        self.config = config
        self.residual = residual
        self._kinematic = isinstance(model, KinematicModel)
        self.buffer = CircularBuffer(config.capacity, model.dim)
        self.last_update: Optional[UpdateRecord] = None
        self._lock = threading.RLock()
        self._odom = np.zeros(3)
        self._ledger: deque[_LedgerEntry] = deque()
        self._pending_targets: deque = deque()

        self._learns = (isinstance(residual, GpResidual) and self._kinematic
                        and hasattr(measurement, "to_position"))

        self.buffer.push(BufferEntry(
            step=0,
            x_pred=self.x.copy(),
            P_pred=self.P.copy(),
            F=np.eye(model.dim),
            Q_eff=np.zeros((model.dim, model.dim)),
            odom=self._odom.copy(),
        ))
        log.debug(f"TSKF ready: buffer capacity {config.capacity}, base={config.innovation_base}")

    # ── Fast context ──

    def fast_predict(self, u, dt: Optional[float] = None) -> None:
        """Advance one step: model + GP mean, P = F P F^T + Q + Sigma_res, push snapshot."""
        dt = self.dt if dt is None else dt
        with self._lock:
            self._drain_targets()
            x_prev = self.x
            F = self.model.jacobian(x_prev, u, dt)
            x_pred = self.model.step(x_prev, u, dt)
            Q = self.model.process_noise(x_prev, u, dt)

            if self._kinematic:
                self._odom = self._odom + (x_pred[POS] - x_prev[POS])
                if self.residual is not None:
                    shift, sigma = self.residual.compensate(x_prev, dt, self.k + 1)
                    if shift is not None:
                        x_pred[POS] += shift
                    Q = Q + sigma

            P_pred = symmetrize(F @ self.P @ F.T + Q)
            x_pred = self.model.normalize(x_pred)
            k = self.k + 1
            self.buffer.push(BufferEntry(k, x_pred, P_pred, F, Q, self._odom.copy()))
            self.x, self.P, self.k = x_pred, P_pred, k

    def step(self, u, dt: Optional[float] = None) -> None:
        self.fast_predict(u, dt)

    def _drain_targets(self) -> None:
        if not self._pending_targets:
            return
        while self._pending_targets:
            feature, target = self._pending_targets.popleft()
            self.residual.observe(feature, target)

    # ── Slow context ──

    def on_measurement(self, pkt, recv_step: Optional[int] = None) -> None:
        """Delayed update at the generation step, projected to the present."""
        with self._lock:
            result = self._prepare(pkt, self.k)
            if isinstance(result, _Correction):
                self._apply(result)
            else:
                self._reject(pkt, *result)

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        self.on_measurement(pkt, recv_step)

    def _prepare(self, pkt, k_now: int):
        g = pkt.gen_step
        entry = self.buffer.lookup(g) if g <= k_now else None
        if entry is None:
            return ("not_retained", float("nan"))

        x_hist = entry.x_pred
        if self.config.innovation_base == "corrected":
            x_hist = self.model.normalize(x_hist + self._ledger_correction(g))

        R = pkt.noise_cov
        try:
            inn = innovate(self.measurement, x_hist, entry.P_pred, pkt.payload, R)
        except DegenerateBearingError:
            return ("degenerate", float("nan"))
        except LinAlgError:
            return ("singular", float("nan"))
        if not passes_gate(inn, self.config.gate_probability):
            return ("gated", inn.nis)

        dx_hist = inn.K @ inn.y
        P_post = joseph_update(entry.P_pred, inn, R)
        phi = self.buffer.stm_product(g, k_now)
        dx_now = phi @ dx_hist
        P_now = None
        if not self.config.mean_only_projection:
            P_now = covariance_fast_forward(self.buffer, P_post, g, k_now)

        path = None
        if self.config.innovation_base == "corrected":
            path = self._correction_path(g, k_now, dx_hist)

        record = UpdateRecord(
            gen_step=g,
            applied_step=k_now,
            H=inn.H,
            S=inn.S,
            K=inn.K,
            nis=inn.nis,
            P_prior=entry.P_pred,
            P_post=P_post,
            dx_hist=dx_hist,
            dx_now=dx_now,
        )
        return _Correction(pkt, record, P_now, x_hist, entry.odom, path)

    def _apply(self, corr: _Correction) -> None:
        rec = corr.record
        self.x = self.model.normalize(self.x + rec.dx_now)
        if corr.P_now is not None:
            self.P = corr.P_now
        self.stats.updates += 1
        self.last_update = rec
        if corr.path is not None:
            self._ledger.append(_LedgerEntry(rec.gen_step, rec.applied_step, np.array(corr.path)))
        self._expire_ledger()
        self._record(corr.pkt, float(np.linalg.norm(rec.dx_now)), rec.nis, True)
        self._learn_from_fix(corr)

    def _reject(self, pkt, reason: str, nis: float) -> None:
        self.stats.rejected += 1
        if reason == "gated":
            self.stats.gated += 1
        elif reason == "not_retained":
            self.stats.not_retained += 1
            log.warning(f"Packet gen_step={pkt.gen_step} outside buffer at step {self.k}; rejected")
        elif reason == "degenerate":
            self.stats.degenerate += 1
        self._record(pkt, 0.0, nis, False, reason)

    # ── Correction ledger ──

    def _correction_path(self, g: int, k_now: int, dx_hist: np.ndarray) -> list:
        Fs, _ = self.buffer.window(g, k_now)
        path = [dx_hist]
        v = dx_hist
        for F in Fs:
            v = F @ v
            path.append(v)
        return path

    def _ledger_correction(self, g: int) -> np.ndarray:
        """Projected corrections generated before g but applied after g was predicted."""
        total = np.zeros(self.model.dim)
        for entry in self._ledger:
            if entry.gen_step < g <= entry.applied_step:
                total += entry.path[g - entry.gen_step]
        return total

    def _expire_ledger(self) -> None:
        oldest = self.buffer.oldest
        while self._ledger and self._ledger[0].applied_step < oldest:
            self._ledger.popleft()

    # ── GP training ──

    def _learn_from_fix(self, corr: _Correction) -> None:
        if not self._learns:
            return
        fix = self.measurement.to_position(corr.pkt.payload)
        pair = self.residual.training_pair(corr.record.gen_step, fix, corr.odom, corr.hist_state)
        if pair is not None:
            self._pending_targets.append(pair)

    # ── Readers ──

    def current_estimate(self) -> tuple[np.ndarray, np.ndarray, int]:
        with self._lock:
            return self.x.copy(), self.P.copy(), self.k

    def estimate(self) -> tuple[np.ndarray, np.ndarray]:
        x, P, _ = self.current_estimate()
        return x, P

    @property
    def state(self) -> TskfState:
        with self._lock:
            return TskfState(self.x.copy(), self.P.copy(), self.buffer, self.residual, self.k, self.stats)


# ─── Concurrent Variant ─────────────────────────────────────────


class ConcurrentTwoSpeedFilter(TwoSpeedFilter):
    """Slow context on a worker thread; the fast context only waits for the atomic apply."""

    name = "tskf"

    def __init__(self, model, measurement, x0, P0, config: TskfConfig, residual=None):
        super().__init__(model, measurement, x0, P0, config, residual)
        self.fast_latencies: list[float] = []
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, name="tskf-slow", daemon=True)
        self._worker.start()

    def fast_predict(self, u, dt: Optional[float] = None) -> None:
        t0 = time.perf_counter()
        super().fast_predict(u, dt)
        self.fast_latencies.append(time.perf_counter() - t0)

    def on_measurement(self, pkt, recv_step: Optional[int] = None) -> None:
        self._queue.put(pkt)

    def drain(self) -> None:
        """Block until every queued packet has been processed."""
        self._queue.join()

    def close(self) -> None:
        if self._worker.is_alive():
            self._queue.put(None)
            self._worker.join()

    def _run(self) -> None:
        while True:
            pkt = self._queue.get()
            try:
                if pkt is None:
                    return
                self._process(pkt)
            except Exception as e:
                log.error(f"Slow context failed on packet gen_step={pkt.gen_step}: {e}")
            finally:
                self._queue.task_done()

    def _process(self, pkt) -> None:
        try:
            result = self._prepare(pkt, self.k)
            # catch up outside the lock, then finish the last few steps inside it
            if isinstance(result, _Correction) and self.k > result.record.applied_step:
                self._advance(result, self.k)
        except NotRetainedError:
            result = ("not_retained", float("nan"))
        with self._lock:
            if isinstance(result, _Correction) and self.k > result.record.applied_step:
                try:
                    self._advance(result, self.k)
                except NotRetainedError:
                    result = ("not_retained", float("nan"))
            if isinstance(result, _Correction):
                self._apply(result)
            else:
                self._reject(pkt, *result)

    def _advance(self, corr: _Correction, k_to: int) -> None:
        rec = corr.record
        Fs, Qs = self.buffer.window(rec.applied_step, k_to)
        dx = rec.dx_now
        P = corr.P_now
        for F, Q in zip(Fs, Qs):
            dx = F @ dx
            if P is not None:
                P = F @ P @ F.T + Q
            if corr.path is not None:
                corr.path.append(dx)
        rec.dx_now = dx
        rec.applied_step = k_to
        corr.P_now = None if P is None else symmetrize(P)


# ─── Functional Surface ─────────────────────────────────────────


def fast_predict(filt: TwoSpeedFilter, u, dt: Optional[float] = None) -> TwoSpeedFilter:
    filt.fast_predict(u, dt)
    return filt


def on_measurement(filt: TwoSpeedFilter, pkt) -> TwoSpeedFilter:
    filt.on_measurement(pkt)
    return filt


def current_estimate(filt: TwoSpeedFilter) -> tuple[np.ndarray, np.ndarray, int]:
    return filt.current_estimate()


def make_tskf(model, measurement, x0, P0, config: TskfConfig, residual=None, concurrent: bool = False):
    cls = ConcurrentTwoSpeedFilter if concurrent else TwoSpeedFilter
    return cls(model, measurement, x0, P0, config, residual)
