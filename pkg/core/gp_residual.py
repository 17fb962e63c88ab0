"""Sliding-window Gaussian Process learner for the unmodeled velocity residual."""

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from core.models import ATT, POS, STATE_DIM, VEL, euler_rotation
from utils.logger import get_logger

log = get_logger("gp")

OUTPUT_DIM = 3
FEATURE_DIM = 5
MIN_RCOND = 1e-12


# ─── Hyperparameters & Window ───────────────────────────────────


@dataclass
class GpHyperparams:
    sigma_f: float = 0.3        # m/s
    length_scale: float = 1.0   # normalized feature units
    sigma_n: float = 0.05       # m/s

    @property
    def prior_variance(self) -> float:
        return self.sigma_f**2

    def validate(self) -> list[tuple[str, str]]:
        return [(name, "must be > 0") for name in ("sigma_f", "length_scale", "sigma_n")
                if not getattr(self, name) > 0]


@dataclass
class _Factor:
    chol: tuple
    lower: np.ndarray
    alpha: np.ndarray
    X: np.ndarray
    degraded: bool


class GpWindow:
    """FIFO training set D = {X, Y} of at most `capacity` samples."""

    def __init__(self, capacity: int = 50):
        if capacity < 1:
            raise ValueError(f"GP window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.X: deque = deque(maxlen=capacity)
        self.Y: deque = deque(maxlen=capacity)
        self._factor: Optional[_Factor] = None

    def __len__(self) -> int:
        return len(self.X)

    def invalidate(self) -> None:
        self._factor = None


class GpPrediction(NamedTuple):
    mean: np.ndarray        # NED m/s
    variance: float         # per-axis, shared kernel
    degraded: bool = False


# ─── Kernel ─────────────────────────────────────────────────────


def kernel(a, b, hp: GpHyperparams) -> float:
    """Squared-exponential kernel sigma_f^2 exp(-|a-b|^2 / 2 l^2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"Feature shapes differ: {a.shape} vs {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return hp.sigma_f**2 * float(np.exp(-0.5 * d2 / hp.length_scale**2))


def kernel_matrix(A: np.ndarray, B: np.ndarray, hp: GpHyperparams) -> np.ndarray:
    d2 = cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean")
    return hp.sigma_f**2 * np.exp(-0.5 * d2 / hp.length_scale**2)


# ─── Window Operations ──────────────────────────────────────────


def observe(window: GpWindow, feature, target) -> None:
    """Append one (feature, target) pair; the deque evicts the oldest when full."""
    window.X.append(np.asarray(feature, dtype=float).copy())
    window.Y.append(np.asarray(target, dtype=float).copy())
    window.invalidate()


def _factorize(window: GpWindow, hp: GpHyperparams) -> _Factor:
    X = np.array(window.X)
    Y = np.array(window.Y)
    gram = kernel_matrix(X, X, hp) + hp.sigma_n**2 * np.eye(len(X))

    eig = np.linalg.eigvalsh(gram)
    rcond = eig[0] / eig[-1] if eig[-1] > 0 else 0.0
    if rcond < MIN_RCOND:
        log.warning(f"GP Gram matrix ill-conditioned (rcond={rcond:.2e}); using prior")
        return _Factor(None, None, None, X, degraded=True)
    try:
        chol = cho_factor(gram, lower=True)
    except LinAlgError:
        log.warning("GP Gram matrix not positive definite; using prior")
        return _Factor(None, None, None, X, degraded=True)
    alpha = cho_solve(chol, Y)
    return _Factor(chol, np.tril(chol[0]), alpha, X, degraded=False)


def predict(window: GpWindow, hp: GpHyperparams, x_star) -> GpPrediction:
    """Posterior mean and variance of the residual at x_star."""
    if len(window) == 0:
        return GpPrediction(np.zeros(OUTPUT_DIM), hp.prior_variance)
    if window._factor is None:
        window._factor = _factorize(window, hp)
    fac = window._factor
    if fac.degraded:
        return GpPrediction(np.zeros(OUTPUT_DIM), hp.prior_variance, degraded=True)

    k_star = kernel_matrix(fac.X, np.asarray(x_star, dtype=float)[None, :], hp)[:, 0]
    mean = k_star @ fac.alpha
    v = solve_triangular(fac.lower, k_star, lower=True)
    variance = hp.prior_variance - float(v @ v)
    return GpPrediction(mean, min(max(variance, 0.0), hp.prior_variance))


def dense_predict(X: np.ndarray, Y: np.ndarray, hp: GpHyperparams, x_star) -> GpPrediction:
    """From-scratch Gram solve; reference for the windowed predictor."""
    if len(X) == 0:
        return GpPrediction(np.zeros(OUTPUT_DIM), hp.prior_variance)
    gram = kernel_matrix(X, X, hp) + hp.sigma_n**2 * np.eye(len(X))
    k_star = kernel_matrix(X, np.asarray(x_star)[None, :], hp)[:, 0]
    mean = k_star @ np.linalg.solve(gram, Y)
    variance = hp.prior_variance - k_star @ np.linalg.solve(gram, k_star)
    return GpPrediction(mean, float(variance))


# ─── Features & Covariance Embedding ────────────────────────────


def features(x: np.ndarray, speed_scale: float, heading_scale: float = 1.0) -> np.ndarray:
    """[h cos psi, h sin psi, u/s, v/s, w/s]."""
    s = speed_scale if speed_scale > 0 else 1.0
    psi = x[8]
    return np.array([heading_scale * np.cos(psi), heading_scale * np.sin(psi), x[3] / s, x[4] / s, x[5] / s])


def residual_covariance(variance, theta, dt: float, correlation_time: float) -> np.ndarray:
    """Embed the per-axis NED residual variance as the 9x9 Sigma_res.

    Velocity block holds the NED variance rotated into body axes; the
    position block grows as a random walk with the residual's correlation time.
    """
    var = np.broadcast_to(np.asarray(variance, dtype=float), (OUTPUT_DIM,))
    sigma = np.zeros((STATE_DIM, STATE_DIM))
    sigma[POS, POS] = np.diag(var) * dt * correlation_time
    rot = euler_rotation(theta)
    sigma[VEL, VEL] = rot.T @ np.diag(var) @ rot
    return sigma


# ─── Training Targets ───────────────────────────────────────────


class AnchoredFix(NamedTuple):
    step: int
    position: np.ndarray
    odom: np.ndarray            # analytic-model displacement accumulated up to step


@dataclass
class ResidualTargetBuilder:
    """Turns accepted position fixes into NED velocity-residual targets.

    A target is the fix-to-fix displacement minus the analytic-model
    displacement over the same interval, divided by the interval. Each fix
    carries its own odometry, so references outlive the state buffer.
    """
    dt: float
    min_baseline_s: float = 20.0
    max_baseline_s: float = 60.0
    max_fixes: int = 64
    fixes: deque = field(default_factory=deque)

    def add_fix(self, gen_step: int, position: np.ndarray, odom: np.ndarray) -> Optional[np.ndarray]:
        """Record a fix and return a target against the oldest earlier fix inside the baseline band."""
        position = np.asarray(position, dtype=float).copy()
        odom = np.asarray(odom, dtype=float).copy()
        min_steps = int(round(self.min_baseline_s / self.dt))
        max_steps = int(round(self.max_baseline_s / self.dt))

        target = None
        for ref in self.fixes:
            span_steps = gen_step - ref.step
            if span_steps > max_steps:
                continue
            if span_steps < min_steps:
                break
            target = ((position - ref.position) - (odom - ref.odom)) / (span_steps * self.dt)
            break

        self.fixes.append(AnchoredFix(gen_step, position, odom))
        # fixes arrive out of order; keep them sorted by generation step
        if len(self.fixes) > 1 and self.fixes[-2].step > gen_step:
            self.fixes = deque(sorted(self.fixes, key=lambda f: f.step))
        self.prune(self.fixes[-1].step - max_steps)
        return target

    def prune(self, horizon_step: int) -> None:
        """Drop fixes older than horizon_step and keep at most max_fixes."""
        while self.fixes and self.fixes[0].step < horizon_step:
            self.fixes.popleft()
        while len(self.fixes) > self.max_fixes:
            self.fixes.popleft()


@dataclass
class GpTraceRow:
    step: int
    mean: np.ndarray
    variance: float
    degraded: bool

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "mean_n": float(self.mean[0]),
            "mean_e": float(self.mean[1]),
            "mean_d": float(self.mean[2]),
            "var_n": self.variance,
            "var_e": self.variance,
            "var_d": self.variance,
            "degraded": self.degraded,
        }


# ─── Residual Compensation ──────────────────────────────────────


class PriorResidual:
    """Constant residual uncertainty at the GP prior; no mean correction."""

    def __init__(self, hp: GpHyperparams, correlation_time: float = 10.0):
        self.variance = hp.prior_variance
        self.correlation_time = correlation_time

    def compensate(self, x: np.ndarray, dt: float, step: int) -> tuple[Optional[np.ndarray], np.ndarray]:
        return None, residual_covariance(self.variance, x[ATT], dt, self.correlation_time)


class GpResidual:
    """Learned residual: GP mean shifts the position, GP variance inflates Q."""

    def __init__(
        self,
        hp: GpHyperparams,
        window_size: int = 50,
        speed_scale: float = 1.0,
        correlation_time: float = 10.0,
        trace_stride: int = 0,
        heading_scale: float = 1.0,
        dt: float = 0.01,
        min_baseline_s: float = 20.0,
        max_baseline_s: float = 60.0,
    ):
        self.hp = hp
        self.window = GpWindow(window_size)
        self.speed_scale = speed_scale
        self.heading_scale = heading_scale
        self.correlation_time = correlation_time
        self.trace_stride = trace_stride
        self.targets = ResidualTargetBuilder(dt, min_baseline_s, max_baseline_s)
        self.trace: list[GpTraceRow] = []
        self.degraded_steps = 0
        self.max_variance = 0.0

    def features(self, x: np.ndarray) -> np.ndarray:
        return features(x, self.speed_scale, self.heading_scale)

    def compensate(self, x: np.ndarray, dt: float, step: int) -> tuple[Optional[np.ndarray], np.ndarray]:
        pred = predict(self.window, self.hp, self.features(x))
        if pred.degraded:
            self.degraded_steps += 1
        self.max_variance = max(self.max_variance, pred.variance)
        if self.trace_stride and step % self.trace_stride == 0:
            self.trace.append(GpTraceRow(step, pred.mean.copy(), pred.variance, pred.degraded))
        sigma = residual_covariance(pred.variance, x[ATT], dt, self.correlation_time)
        return pred.mean * dt, sigma

    def observe(self, feature: np.ndarray, target: np.ndarray) -> None:
        observe(self.window, feature, target)

    def training_pair(self, gen_step: int, position: np.ndarray, odom: np.ndarray,
                      state: np.ndarray) -> Optional[tuple[np.ndarray, np.ndarray]]:
        """(feature, target) for an accepted fix, or None while no reference fix qualifies."""
        target = self.targets.add_fix(gen_step, position, odom)
        if target is None:
            return None
        return self.features(state), target
