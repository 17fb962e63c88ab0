"""Ground-truth lawnmower trajectory, ocean current and proprioceptive sensors."""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from core.models import (
    ATT,
    POS,
    STATE_DIM,
    VEL,
    ControlInput,
    euler_rotation,
    propagate,
    state_vector,
)
from utils.linalg import wrap_angle
from utils.logger import get_logger

log = get_logger("scenario")

HOUR = 3600.0
DEG = np.pi / 180.0

CURRENT_MODES = ("constant", "slowly_rotating")
DVL_REFERENCES = ("water", "bottom")
DR_MODES = ("velocity", "accel")


# ─── Configuration ──────────────────────────────────────────────


@dataclass
class ScenarioConfig:
    """Survey geometry and disturbance for one simulated follower."""
    leg_length: float = 200.0              # m
    leg_spacing: float = 20.0              # m
    num_legs: int = 3
    cruise_speed: float = 2.0              # m/s through water; 0 = pure drift
    depth: float = 10.0                    # m
    duration: float = 600.0                # s
    dt: float = 0.01                       # s
    current_velocity: tuple = (0.2, 0.1, 0.0)   # NED m/s
    current_mode: str = "constant"
    current_rotation_period: float = 3600.0     # s per full turn in slowly_rotating mode
    blackout: list = field(default_factory=list)  # [(start_s, end_s), ...] without broadcasts
    seed: int = 0

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def validate(self) -> list[tuple[str, str]]:
        """Return (field, message) pairs for every broken invariant."""
        problems = []
        if not self.dt > 0:
            problems.append(("dt", "must be > 0"))
        if not self.duration >= self.dt:
            problems.append(("duration", "must be >= dt"))
        if not self.cruise_speed >= 0:
            problems.append(("cruise_speed", "must be >= 0"))
        if self.num_legs < 1:
            problems.append(("num_legs", "must be >= 1"))
        if not self.leg_length > 0:
            problems.append(("leg_length", "must be > 0"))
        if not self.leg_spacing > 0:
            problems.append(("leg_spacing", "must be > 0"))
        if len(self.current_velocity) != 3:
            problems.append(("current_velocity", "must have 3 components"))
        if self.current_mode not in CURRENT_MODES:
            problems.append(("current_mode", f"must be one of {CURRENT_MODES}"))
        if not self.current_rotation_period > 0:
            problems.append(("current_rotation_period", "must be > 0"))
        for i, window in enumerate(self.blackout):
            if len(window) != 2 or not window[0] < window[1]:
                problems.append((f"blackout[{i}]", "must be [start, end] with start < end"))
        return problems

    def in_blackout(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.blackout)


@dataclass
class SensorSpec:
    """Proprioceptive sensor grades in datasheet units."""
    imu_rate: float = 100.0                 # Hz
    accel_random_walk: float = 0.05         # m/s/sqrt(hr)
    gyro_random_walk: float = 0.01          # deg/sqrt(hr)
    dvl_noise_std: float = 0.05             # m/s
    dvl_reference: str = "water"            # water-track misses the current
    dr_mode: str = "velocity"               # velocity (DVL) or accel driven

    @property
    def dt(self) -> float:
        return 1.0 / self.imu_rate

    @property
    def gyro_std(self) -> float:
        """Per-step gyro noise std, rad/s."""
        return self.gyro_random_walk * DEG / np.sqrt(HOUR) / np.sqrt(self.dt)

    @property
    def accel_std(self) -> float:
        """Per-step accelerometer noise std, m/s^2."""
        return self.accel_random_walk / np.sqrt(HOUR) / np.sqrt(self.dt)

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        for name in ("imu_rate", "accel_random_walk", "gyro_random_walk", "dvl_noise_std"):
            if not getattr(self, name) > 0:
                problems.append((name, "must be > 0"))
        if self.dvl_reference not in DVL_REFERENCES:
            problems.append(("dvl_reference", f"must be one of {DVL_REFERENCES}"))
        if self.dr_mode not in DR_MODES:
            problems.append(("dr_mode", f"must be one of {DR_MODES}"))
        return problems


# ─── Truth ──────────────────────────────────────────────────────


@dataclass
class TruthSample:
    step: int
    time: float
    state: np.ndarray
    current: np.ndarray
    omega_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_b: np.ndarray = field(default_factory=lambda: np.zeros(3))


class Truth:
    """Ground-truth trajectory stored as arrays; indexing yields TruthSample."""

    def __init__(self, dt, states, currents, omegas, accels, truncated=False):
        self.dt = dt
        self.states = states
        self.currents = currents
        self.omegas = omegas
        self.accels = accels
        self.truncated = truncated

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, k: int) -> TruthSample:
        if k < 0:
            k += len(self)
        return TruthSample(
            step=k,
            time=k * self.dt,
            state=self.states[k].copy(),
            current=self.currents[k].copy(),
            omega_b=self.omegas[k].copy(),
            a_b=self.accels[k].copy(),
        )

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, POS]


def _pattern_commands(cfg: ScenarioConfig, n: int) -> tuple[np.ndarray, bool]:
    """Per-step commanded yaw rate for a boustrophedon that reflects at the edges.

    Legs and half-circle turns are quantized to whole steps so each leg
    holds an exact heading.
    """
    yaw_rate = np.zeros(n)
    if cfg.cruise_speed == 0:
        return yaw_rate, False

    leg_steps = max(1, int(round(cfg.leg_length / (cfg.cruise_speed * cfg.dt))))
    radius = cfg.leg_spacing / 2.0
    turn_steps = max(1, int(round(np.pi * radius / (cfg.cruise_speed * cfg.dt))))
    turn_rate = np.pi / (turn_steps * cfg.dt)

    pattern_steps = cfg.num_legs * leg_steps + (cfg.num_legs - 1) * turn_steps
    truncated = pattern_steps > n

    # single-leg surveys keep going straight
    k = leg_steps
    lane, direction = 0, 1
    northbound = True
    while k < n and cfg.num_legs > 1:
        if not 0 <= lane + direction < cfg.num_legs:
            direction = -direction
        # turning toward east is clockwise when northbound
        sign = direction * (1.0 if northbound else -1.0)
        yaw_rate[k:k + turn_steps] = sign * turn_rate
        k += turn_steps + leg_steps
        lane += direction
        northbound = not northbound
    return yaw_rate, truncated


def current_at(cfg: ScenarioConfig, t) -> np.ndarray:
    """NED current velocity at time t (scalar or array of times)."""
    base = np.asarray(cfg.current_velocity, dtype=float)
    t = np.asarray(t, dtype=float)
    if cfg.current_mode == "constant":
        return np.broadcast_to(base, t.shape + (3,)).copy()
    angle = 2.0 * np.pi * t / cfg.current_rotation_period
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty(t.shape + (3,))
    out[..., 0] = c * base[0] - s * base[1]
    out[..., 1] = s * base[0] + c * base[1]
    out[..., 2] = base[2]
    return out


def generate_truth(cfg: ScenarioConfig) -> Truth:
    """Integrate the lawnmower pattern plus current with the model's Euler scheme.

    Roll and pitch stay zero (constant-depth survey), so yaw integrates as a
    running sum and position as a running sum of rotated velocity plus current.
    """
    n = cfg.num_steps
    dt = cfg.dt
    yaw_rate, truncated = _pattern_commands(cfg, n)
    if truncated:
        log.warning(
            f"Pattern of {cfg.num_legs} legs does not fit in {cfg.duration:.0f} s; truth is truncated"
        )

    times = np.arange(n + 1) * dt
    currents = current_at(cfg, times)

    psi = np.zeros(n + 1)
    psi[1:] = np.cumsum(yaw_rate * dt)
    psi = wrap_angle(psi)

    v_body = np.array([cfg.cruise_speed, 0.0, 0.0])
    step_n = (np.cos(psi[:-1]) * v_body[0]) * dt + currents[:-1, 0] * dt
    step_e = (np.sin(psi[:-1]) * v_body[0]) * dt + currents[:-1, 1] * dt
    step_d = currents[:-1, 2] * dt

    states = np.zeros((n + 1, STATE_DIM))
    states[0] = state_vector((0.0, 0.0, cfg.depth), v_body, (0.0, 0.0, 0.0))
    states[1:, 0] = np.cumsum(step_n)
    states[1:, 1] = np.cumsum(step_e)
    states[1:, 2] = cfg.depth + np.cumsum(step_d)
    states[:, VEL] = v_body
    states[:, 8] = psi

    omegas = np.zeros((n + 1, 3))
    omegas[:-1, 2] = yaw_rate
    accels = np.zeros((n + 1, 3))

    log.debug(f"Truth generated: {n + 1} samples, truncated={truncated}")
    return Truth(dt, states, currents, omegas, accels, truncated=truncated)


# ─── Sensors ────────────────────────────────────────────────────


def _true_dvl(sample: TruthSample, sensors: SensorSpec) -> np.ndarray:
    v = sample.state[VEL].copy()
    if sensors.dvl_reference == "bottom":
        v = v + euler_rotation(sample.state[ATT]).T @ sample.current
    return v


def sample_dvl(truth: TruthSample, rng: np.random.Generator, sensors: SensorSpec) -> np.ndarray:
    """DVL body velocity plus white noise."""
    return _true_dvl(truth, sensors) + rng.normal(0.0, sensors.dvl_noise_std, 3)


def sample_gyro(truth: TruthSample, rng: np.random.Generator, sensors: SensorSpec) -> np.ndarray:
    """Body rates plus angle-random-walk noise at the IMU step."""
    return truth.omega_b + rng.normal(0.0, sensors.gyro_std, 3)


def sample_accel(truth: TruthSample, rng: np.random.Generator, sensors: SensorSpec) -> np.ndarray:
    """Body acceleration plus velocity-random-walk noise at the IMU step."""
    return truth.a_b + rng.normal(0.0, sensors.accel_std, 3)


@dataclass
class SensorStream:
    """Per-step proprioceptive inputs; row j drives the step j -> j+1."""
    dvl: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    dr_mode: str = "velocity"

    def __len__(self) -> int:
        return self.gyro.shape[0]

    def control(self, k: int) -> ControlInput:
        """Input that produces step k from step k-1 (k >= 1)."""
        j = k - 1
        if self.dr_mode == "velocity":
            return ControlInput(self.gyro[j], np.zeros(3), self.dvl[j])
        return ControlInput(self.gyro[j], self.accel[j])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.dvl, self.gyro, self.accel):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(self.dr_mode.encode())
        return h.hexdigest()


def _true_inputs(truth: Truth, sensors: SensorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(truth) - 1
    v_true = truth.states[:n, VEL].copy()
    if sensors.dvl_reference == "bottom":
        # roll and pitch are zero along the survey, so R^T is a yaw rotation
        psi = truth.states[:n, 8]
        c, s = np.cos(psi), np.sin(psi)
        cur = truth.currents[:n]
        v_true[:, 0] += c * cur[:, 0] + s * cur[:, 1]
        v_true[:, 1] += -s * cur[:, 0] + c * cur[:, 1]
        v_true[:, 2] += cur[:, 2]
    return v_true, truth.omegas[:n].copy(), truth.accels[:n].copy()


def sample_stream(truth: Truth, sensors: SensorSpec, rng: np.random.Generator) -> SensorStream:
    """Sample every step's DVL, gyro and accel in one vectorized draw."""
    v_true, omega, accel = _true_inputs(truth, sensors)
    n = v_true.shape[0]
    return SensorStream(
        dvl=v_true + rng.normal(0.0, sensors.dvl_noise_std, (n, 3)),
        gyro=omega + rng.normal(0.0, sensors.gyro_std, (n, 3)),
        accel=accel + rng.normal(0.0, sensors.accel_std, (n, 3)),
        dr_mode=sensors.dr_mode,
    )


def noiseless_stream(truth: Truth, sensors: SensorSpec) -> SensorStream:
    """Exact inputs; used for closure checks."""
    v_true, omega, accel = _true_inputs(truth, sensors)
    return SensorStream(dvl=v_true, gyro=omega, accel=accel, dr_mode=sensors.dr_mode)


def dead_reckon(truth: Truth, stream: SensorStream, steps: int | None = None) -> np.ndarray:
    """Uncompensated dead reckoning from the true initial state."""
    n = len(stream) if steps is None else min(steps, len(stream))
    out = np.empty((n + 1, STATE_DIM))
    out[0] = truth.states[0]
    x = out[0]
    for k in range(1, n + 1):
        x = propagate(x, stream.control(k), truth.dt)
        out[k] = x
    return out
