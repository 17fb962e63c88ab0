"""6-DOF kinematics, measurement models and their Jacobians.

State layout (9 components, fixed order):
    [x, y, z,  u, v, w,  phi, theta, psi]
     NED pos   body vel   Euler attitude (roll, pitch, yaw)

Every estimator talks to the dynamics through a motion model and a
measurement model object, so the same filters also run on plain linear
systems for the re-filtering oracles.
"""

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from core.errors import DegenerateBearingError, GimbalLockError
from utils.linalg import is_psd, is_symmetric, wrap_angle

STATE_DIM = 9
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
POS_INDICES = (0, 1, 2)
ATT_INDICES = (6, 7, 8)

GIMBAL_MARGIN = 1e-6
BEARING_EPS = 1e-9


# ─── Domain Types ───────────────────────────────────────────────


def state_vector(p_n=(0.0, 0.0, 0.0), v_b=(0.0, 0.0, 0.0), theta=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Assemble a 9-component state; attitude is wrapped to (-pi, pi]."""
    x = np.zeros(STATE_DIM)
    x[POS] = p_n
    x[VEL] = v_b
    x[ATT] = wrap_angle(np.asarray(theta, dtype=float))
    return x


def check_state(x: np.ndarray) -> None:
    """Raise if the state breaks the layout or the pitch guard."""
    if x.shape != (STATE_DIM,):
        raise ValueError(f"State must have shape ({STATE_DIM},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("State contains non-finite components")
    _check_pitch(x[7])


@dataclass
class ControlInput:
    """High-rate proprioceptive input for one step.

    omega_b: body angular rates (rad/s)
    a_b: body linear acceleration (m/s^2), zero for velocity-driven DR
    v_dvl: DVL body velocity (m/s); when set it replaces v_b for the step
    """
    omega_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_dvl: np.ndarray | None = None

    def __post_init__(self):
        self.omega_b = np.asarray(self.omega_b, dtype=float)
        self.a_b = np.asarray(self.a_b, dtype=float)
        if self.v_dvl is not None:
            self.v_dvl = np.asarray(self.v_dvl, dtype=float)
        parts = [self.omega_b, self.a_b] + ([self.v_dvl] if self.v_dvl is not None else [])
        if not all(np.all(np.isfinite(p)) for p in parts):
            raise ValueError("Control input contains non-finite components")


@dataclass
class NoiseConfig:
    """Per-step process noise Q (n x n) and measurement noise R (m x m)."""
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, mat in (("Q", self.Q), ("R", self.R)):
            if mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square, got {mat.shape}")
            if not (is_symmetric(mat) and is_psd(mat)):
                raise ValueError(f"{name} must be symmetric positive semi-definite")


@dataclass
class InputNoise:
    """Per-step standard deviations of the proprioceptive inputs."""
    dvl_std: float = 0.0          # m/s per axis
    gyro_std: float = 0.0         # rad/s per axis, already divided by sqrt(dt)
    accel_std: float = 0.0        # m/s^2 per axis, already divided by sqrt(dt)


# ─── Rotation & Attitude Kinematics ─────────────────────────────


def _check_pitch(pitch: float) -> None:
    if abs(pitch) >= np.pi / 2 - GIMBAL_MARGIN:
        raise GimbalLockError(f"Pitch {pitch:.6f} rad is within {GIMBAL_MARGIN} of +/- pi/2")


def _axis_rotations(theta):
    phi, th, psi = theta
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(th), np.sin(th)
    cp, sp = np.cos(psi), np.sin(psi)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cf, -sf], [0.0, sf, cf]])
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sf, -cf], [0.0, cf, -sf]])
    dry = np.array([[-st, 0.0, ct], [0.0, 0.0, 0.0], [-ct, 0.0, -st]])
    drz = np.array([[-sp, -cp, 0.0], [cp, -sp, 0.0], [0.0, 0.0, 0.0]])
    return rx, ry, rz, drx, dry, drz


def euler_rotation(theta) -> np.ndarray:
    """Body-to-NED rotation R = Rz(psi) Ry(theta) Rx(phi)."""
    theta = np.asarray(theta, dtype=float)
    _check_pitch(theta[1])
    rx, ry, rz, *_ = _axis_rotations(theta)
    return rz @ ry @ rx


def euler_rotation_partials(theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dR/dphi, dR/dtheta, dR/dpsi."""
    theta = np.asarray(theta, dtype=float)
    _check_pitch(theta[1])
    rx, ry, rz, drx, dry, drz = _axis_rotations(theta)
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def attitude_rate_matrix(theta) -> np.ndarray:
    """Map body rates to Euler-angle rates."""
    phi, th = theta[0], theta[1]
    _check_pitch(th)
    cf, sf = np.cos(phi), np.sin(phi)
    ct, tt = np.cos(th), np.tan(th)
    return np.array([
        [1.0, sf * tt, cf * tt],
        [0.0, cf, -sf],
        [0.0, sf / ct, cf / ct],
    ])


def _attitude_rate_partials(theta) -> tuple[np.ndarray, np.ndarray]:
    phi, th = theta[0], theta[1]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st, tt = np.cos(th), np.sin(th), np.tan(th)
    sec2 = 1.0 / ct**2
    d_phi = np.array([
        [0.0, cf * tt, -sf * tt],
        [0.0, -sf, -cf],
        [0.0, cf / ct, -sf / ct],
    ])
    d_theta = np.array([
        [0.0, sf * sec2, cf * sec2],
        [0.0, 0.0, 0.0],
        [0.0, sf * st * sec2, cf * st * sec2],
    ])
    return d_phi, d_theta


# ─── Transition ─────────────────────────────────────────────────


def _velocity_in(x: np.ndarray, u: ControlInput) -> np.ndarray:
    return u.v_dvl if u.v_dvl is not None else x[VEL]


def propagate(x: np.ndarray, u: ControlInput, dt: float) -> np.ndarray:
    """Forward-Euler 6-DOF kinematic step f(x, u); no noise, no residual."""
    theta = x[ATT]
    rot = euler_rotation(theta)
    v_in = _velocity_in(x, u)

    out = np.empty(STATE_DIM)
    out[POS] = x[POS] + rot @ v_in * dt
    out[VEL] = v_in + u.a_b * dt
    out[ATT] = wrap_angle(theta + attitude_rate_matrix(theta) @ u.omega_b * dt)
    return out


def jacobian_f(x: np.ndarray, u: ControlInput, dt: float) -> np.ndarray:
    """d propagate / d x evaluated at (x, u).

    With a DVL sample in u the velocity is an input, so the velocity columns
    vanish.
    """
    theta = x[ATT]
    v_in = _velocity_in(x, u)
    d_rphi, d_rth, d_rpsi = euler_rotation_partials(theta)
    d_tphi, d_tth = _attitude_rate_partials(theta)

    F = np.eye(STATE_DIM)
    if u.v_dvl is None:
        F[POS, VEL] = euler_rotation(theta) * dt
    else:
        F[VEL, VEL] = 0.0
    F[POS, 6] = d_rphi @ v_in * dt
    F[POS, 7] = d_rth @ v_in * dt
    F[POS, 8] = d_rpsi @ v_in * dt
    F[6:9, 6] += d_tphi @ u.omega_b * dt
    F[6:9, 7] += d_tth @ u.omega_b * dt
    return F


def input_jacobians(x: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobians of the step w.r.t. the velocity, rate and accel inputs."""
    theta = x[ATT]
    g_v = np.zeros((STATE_DIM, 3))
    g_v[POS] = euler_rotation(theta) * dt
    g_v[VEL] = np.eye(3)
    g_w = np.zeros((STATE_DIM, 3))
    g_w[ATT] = attitude_rate_matrix(theta) * dt
    g_a = np.zeros((STATE_DIM, 3))
    g_a[VEL] = np.eye(3) * dt
    return g_v, g_w, g_a


# ─── Measurement ────────────────────────────────────────────────


def measure(x: np.ndarray, mode: str = "position", reference=None) -> np.ndarray:
    """h(x): absolute position, or (range, bearing, depth) w.r.t. a reference."""
    if mode == "position":
        return x[POS].copy()
    if mode == "range_bearing":
        ref = np.zeros(3) if reference is None else np.asarray(reference, dtype=float)
        rel = x[POS] - ref
        horiz = np.hypot(rel[0], rel[1])
        if horiz < BEARING_EPS:
            raise DegenerateBearingError("Bearing undefined at zero horizontal separation")
        return np.array([np.linalg.norm(rel), np.arctan2(rel[1], rel[0]), x[2]])
    raise ValueError(f"Unknown measurement mode: {mode}")


def jacobian_h(x: np.ndarray, mode: str = "position", reference=None) -> np.ndarray:
    """dh/dx for the selected measurement mode."""
    H = np.zeros((3, STATE_DIM))
    if mode == "position":
        H[:, POS] = np.eye(3)
        return H
    if mode == "range_bearing":
        ref = np.zeros(3) if reference is None else np.asarray(reference, dtype=float)
        rel = x[POS] - ref
        horiz2 = rel[0] ** 2 + rel[1] ** 2
        if np.sqrt(horiz2) < BEARING_EPS:
            raise DegenerateBearingError("Bearing undefined at zero horizontal separation")
        H[0, POS] = rel / np.linalg.norm(rel)
        H[1, 0] = -rel[1] / horiz2
        H[1, 1] = rel[0] / horiz2
        H[2, 2] = 1.0
        return H
    raise ValueError(f"Unknown measurement mode: {mode}")


# ─── Model Objects ──────────────────────────────────────────────


class MotionModel(Protocol):
    dim: int

    def step(self, x: np.ndarray, u, dt: float) -> np.ndarray: ...
    def jacobian(self, x: np.ndarray, u, dt: float) -> np.ndarray: ...
    def process_noise(self, x: np.ndarray, u, dt: float) -> np.ndarray: ...
    def normalize(self, x: np.ndarray) -> np.ndarray: ...
    def difference(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


class MeasurementModel(Protocol):
    dim: int
    state_indices: tuple[int, ...]

    def measure(self, x: np.ndarray) -> np.ndarray: ...
    def jacobian(self, x: np.ndarray) -> np.ndarray: ...
    def residual(self, z: np.ndarray, z_hat: np.ndarray) -> np.ndarray: ...


class KinematicModel:
    """6-DOF dead-reckoning model with input-noise mapping."""

    dim = STATE_DIM

    def __init__(self, q_base: np.ndarray | None = None, input_noise: InputNoise | None = None):
        self.q_base = np.zeros((STATE_DIM, STATE_DIM)) if q_base is None else np.asarray(q_base, dtype=float)
        self.input_noise = input_noise or InputNoise()

    def step(self, x, u, dt):
        return propagate(x, u, dt)

    def jacobian(self, x, u, dt):
        return jacobian_f(x, u, dt)

    def process_noise(self, x, u, dt):
        g_v, g_w, g_a = input_jacobians(x, dt)
        n = self.input_noise
        Q = self.q_base.copy()
        if u.v_dvl is not None and n.dvl_std > 0.0:
            Q += n.dvl_std**2 * (g_v @ g_v.T)
        if n.gyro_std > 0.0:
            Q += n.gyro_std**2 * (g_w @ g_w.T)
        if u.v_dvl is None and n.accel_std > 0.0:
            Q += n.accel_std**2 * (g_a @ g_a.T)
        return Q

    def normalize(self, x):
        out = x.copy()
        out[ATT] = wrap_angle(out[ATT])
        return out

    def difference(self, a, b):
        d = a - b
        d[ATT] = wrap_angle(d[ATT])
        return d


class LinearModel:
    """x_k = F x_{k-1} (+ B u) with constant process noise Q."""

    def __init__(self, F: np.ndarray, Q: np.ndarray, B: np.ndarray | None = None):
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.B = None if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        self.dim = self.F.shape[0]

    def step(self, x, u, dt):
        out = self.F @ x
        if self.B is not None and u is not None:
            out = out + self.B @ np.atleast_1d(u)
        return out

    def jacobian(self, x, u, dt):
        return self.F

    def process_noise(self, x, u, dt):
        return self.Q

    def normalize(self, x):
        return x

    def difference(self, a, b):
        return a - b


class PositionMeasurement:
    """Absolute NED position broadcast (default, linear)."""

    dim = 3
    state_indices = POS_INDICES
    mode = "position"

    def measure(self, x):
        return measure(x, "position")

    def jacobian(self, x):
        return jacobian_h(x, "position")

    def residual(self, z, z_hat):
        return z - z_hat

    def to_position(self, z):
        return np.asarray(z, dtype=float).copy()


class RangeBearingMeasurement:
    """Range, bearing and depth relative to a reference (leader) position."""

    dim = 3
    state_indices = POS_INDICES
    mode = "range_bearing"

    def __init__(self, reference=(0.0, 0.0, 0.0)):
        self.reference = np.asarray(reference, dtype=float)

    def measure(self, x):
        return measure(x, "range_bearing", self.reference)

    def jacobian(self, x):
        return jacobian_h(x, "range_bearing", self.reference)

    def residual(self, z, z_hat):
        r = z - z_hat
        r[1] = wrap_angle(r[1])
        return r

    def to_position(self, z):
        """Invert (range, bearing, depth) to an NED position fix."""
        rng, bearing, depth = z
        horiz = np.sqrt(max(rng**2 - (depth - self.reference[2]) ** 2, 0.0))
        return np.array([
            self.reference[0] + horiz * np.cos(bearing),
            self.reference[1] + horiz * np.sin(bearing),
            depth,
        ])


class LinearMeasurement:
    """z = H x; used by the linear oracles."""

    def __init__(self, H: np.ndarray):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.dim = self.H.shape[0]
        self.state_indices = tuple(int(i) for i in np.flatnonzero(np.any(self.H != 0.0, axis=0)))

    def measure(self, x):
        return self.H @ x

    def jacobian(self, x):
        return self.H

    def residual(self, z, z_hat):
        return z - z_hat


def make_measurement_model(mode: str, reference=None):
    """Build the measurement model named by a config switch."""
    if mode == "position":
        return PositionMeasurement()
    if mode == "range_bearing":
        return RangeBearingMeasurement(np.zeros(3) if reference is None else reference)
    raise ValueError(f"Unknown measurement mode: {mode}")
