"""Experiment configuration: TOML file + flag overrides -> validated dataclasses."""

import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from core.baselines import UtParams
from core.channel import ChannelConfig
from core.errors import ConfigError
from core.fgo import FgoConfig
from core.models import InputNoise, make_measurement_model
from core.scenario import ScenarioConfig, SensorSpec
from core.gp_residual import GpHyperparams, GpResidual
from core.tskf import TskfConfig
from utils.logger import get_logger

log = get_logger("config")

ALGORITHMS = ("tskf", "ekf", "ukf", "aug_ekf", "fgo")
DEFAULT_ALGORITHMS = ("tskf", "ekf", "aug_ekf", "fgo")
MEASUREMENT_MODES = ("position", "range_bearing")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
FULL_SCALE_RUNS = 500


# ─── Section Types ──────────────────────────────────────────────


@dataclass
class NoiseSettings:
    """Acoustic fix noise, analytic-model process noise and the initial uncertainty."""
    measurement_mode: str = "position"
    position_std: float = 1.0          # m, per axis
    range_std: float = 1.0             # m
    bearing_std: float = 0.01          # rad
    depth_std: float = 0.1             # m
    q_position: float = 1e-4           # m^2/s
    q_velocity: float = 1e-4           # (m/s)^2/s
    q_attitude: float = 1e-8           # rad^2/s
    initial_position_std: float = 1.0  # m
    initial_velocity_std: float = 0.1  # m/s
    initial_attitude_std: float = 0.01 # rad

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        if self.measurement_mode not in MEASUREMENT_MODES:
            problems.append(("measurement_mode", f"must be one of {MEASUREMENT_MODES}"))
        for f in fields(self):
            if f.name != "measurement_mode" and getattr(self, f.name) < 0:
                problems.append((f.name, "must be >= 0"))
        return problems

    def measurement_cov(self) -> np.ndarray:
        if self.measurement_mode == "position":
            return np.eye(3) * self.position_std**2
        return np.diag([self.range_std**2, self.bearing_std**2, self.depth_std**2])

    def q_base(self, dt: float) -> np.ndarray:
        return np.diag([self.q_position] * 3 + [self.q_velocity] * 3 + [self.q_attitude] * 3) * dt

    def initial_cov(self) -> np.ndarray:
        return np.diag(
            [self.initial_position_std**2] * 3
            + [self.initial_velocity_std**2] * 3
            + [self.initial_attitude_std**2] * 3
        )


@dataclass
class GpSettings:
    sigma_f: float = 0.3
    length_scale: float = 1.0
    sigma_n: float = 0.05
    window_size: int = 50
    correlation_time: float = 10.0     # s
    trace_stride: int = 100            # steps between GP trace rows
    heading_scale: float = 0.25        # weight of the heading features
    min_baseline_s: float = 20.0       # fix-to-fix span of a training target
    max_baseline_s: float = 60.0

    @property
    def hyperparams(self) -> GpHyperparams:
        return GpHyperparams(self.sigma_f, self.length_scale, self.sigma_n)

    def build(self, dt: float, speed_scale: float) -> GpResidual:
        return GpResidual(
            self.hyperparams,
            window_size=self.window_size,
            speed_scale=speed_scale,
            correlation_time=self.correlation_time,
            trace_stride=self.trace_stride,
            heading_scale=self.heading_scale,
            dt=dt,
            min_baseline_s=self.min_baseline_s,
            max_baseline_s=self.max_baseline_s,
        )

    def validate(self) -> list[tuple[str, str]]:
        problems = self.hyperparams.validate()
        if self.window_size < 1:
            problems.append(("window_size", "must be >= 1"))
        if not self.correlation_time > 0:
            problems.append(("correlation_time", "must be > 0"))
        if self.trace_stride < 0:
            problems.append(("trace_stride", "must be >= 0"))
        if not self.heading_scale > 0:
            problems.append(("heading_scale", "must be > 0"))
        if not self.min_baseline_s > 0:
            problems.append(("min_baseline_s", "must be > 0"))
        if not self.max_baseline_s >= self.min_baseline_s:
            problems.append(("max_baseline_s", "must be >= min_baseline_s"))
        return problems


@dataclass
class TskfSettings:
    mean_only_projection: bool = False
    innovation_base: str = "corrected"
    use_gp: bool = True
    gate_probability: float = 0.999
    concurrent: bool = False

    def build(self, dt: float, max_delay: float) -> TskfConfig:
        return TskfConfig(
            dt=dt,
            max_delay=max_delay,
            mean_only_projection=self.mean_only_projection,
            innovation_base=self.innovation_base,
            use_gp=self.use_gp,
            gate_probability=self.gate_probability,
        )

    def validate(self) -> list[tuple[str, str]]:
        problems = self.build(0.01, 0.0).validate()
        if not 0.0 < self.gate_probability <= 1.0:
            problems.append(("gate_probability", "must be in (0, 1]"))
        return problems


@dataclass
class AugEkfSettings:
    lag_stride: int = 1                # 1 = full augmentation
    memory_budget_mb: float = 512.0
    gate_probability: float = 0.999

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        if self.lag_stride < 1:
            problems.append(("lag_stride", "must be >= 1"))
        if not self.memory_budget_mb > 0:
            problems.append(("memory_budget_mb", "must be > 0"))
        if not 0.0 < self.gate_probability <= 1.0:
            problems.append(("gate_probability", "must be in (0, 1]"))
        return problems


@dataclass
class ExperimentSettings:
    algorithms: list = field(default_factory=lambda: list(DEFAULT_ALGORITHMS))
    runs: int = 50
    master_seed: int = 0
    output_dir: str = "results"
    delay_cells: list = field(default_factory=lambda: [10.0, 20.0, 30.0])
    include_dynamic: bool = True
    workers: int = 1
    divergence_threshold: float = 50.0  # m
    trace_stride: int = 10              # steps between trace rows

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown or not self.algorithms:
            problems.append(("algorithms", f"must be a non-empty subset of {ALGORITHMS}"))
        if self.runs < 1:
            problems.append(("runs", "must be >= 1"))
        if self.workers < 1:
            problems.append(("workers", "must be >= 1"))
        if any(not d > 0 for d in self.delay_cells):
            problems.append(("delay_cells", "every delay must be > 0"))
        if not self.divergence_threshold > 0:
            problems.append(("divergence_threshold", "must be > 0"))
        if self.trace_stride < 1:
            problems.append(("trace_stride", "must be >= 1"))
        return problems


@dataclass
class LoggingSettings:
    level: str = "INFO"

    def validate(self) -> list[tuple[str, str]]:
        if self.level.upper() not in LOG_LEVELS:
            return [("level", f"must be one of {LOG_LEVELS}")]
        return []


SECTIONS = {
    "scenario": ScenarioConfig,
    "sensors": SensorSpec,
    "channel": ChannelConfig,
    "noise": NoiseSettings,
    "gp": GpSettings,
    "tskf": TskfSettings,
    "ukf": UtParams,
    "aug_ekf": AugEkfSettings,
    "fgo": FgoConfig,
    "experiment": ExperimentSettings,
    "logging": LoggingSettings,
}

TUPLE_FIELDS = {("scenario", "current_velocity"), ("channel", "leader_position")}


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sensors: SensorSpec = field(default_factory=SensorSpec)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    gp: GpSettings = field(default_factory=GpSettings)
    tskf: TskfSettings = field(default_factory=TskfSettings)
    ukf: UtParams = field(default_factory=UtParams)
    aug_ekf: AugEkfSettings = field(default_factory=AugEkfSettings)
    fgo: FgoConfig = field(default_factory=FgoConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    logging: LoggingSettings = field(default_factory=LoggingSettings)

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigError on the first broken invariant; return self otherwise."""
        for section in SECTIONS:
            for name, message in getattr(self, section).validate():
                raise ConfigError(f"{section}.{name}", message)
        if abs(self.sensors.dt - self.scenario.dt) > 1e-12:
            raise ConfigError("sensors.imu_rate", f"must equal 1 / scenario.dt ({1.0 / self.scenario.dt:g} Hz)")
        return self

    # ── Derived objects ──

    @property
    def dt(self) -> float:
        return self.scenario.dt

    def measurement(self):
        return make_measurement_model(self.noise.measurement_mode, np.asarray(self.channel.leader_position, dtype=float))

    def input_noise(self) -> InputNoise:
        return InputNoise(
            dvl_std=self.sensors.dvl_noise_std,
            gyro_std=self.sensors.gyro_std,
            accel_std=self.sensors.accel_std,
        )

    def with_delay(self, ceiling: float, mode: str) -> "ExperimentConfig":
        """Copy with the channel pinned to one delay cell."""
        return replace(self, channel=replace(self.channel, delay_ceiling=ceiling, delay_mode=mode))


# ─── Parsing ────────────────────────────────────────────────────


_TOML_LINE = re.compile(r"line (\d+)")


def _locate(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    """1-based line of `[section]` or of `key` inside it, if present."""
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line.strip("[]").strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*=", line):
            return lineno
    return None


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(section: str, key: str, value, default, text: str):
    path = f"{section}.{key}"
    line = _locate(text, section, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "must be true or false", line)
        return value
    if isinstance(default, (int, float)):
        if not _is_number(value):
            raise ConfigError(path, f"must be a number, got {value!r}", line)
        if isinstance(default, float):
            return float(value)
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"must be an integer, got {value!r}", line)
        return int(value)
    if (section, key) in TUPLE_FIELDS:
        if not isinstance(value, list) or len(value) != 3 or not all(_is_number(v) for v in value):
            raise ConfigError(path, "must be a list of 3 numbers", line)
        return tuple(float(v) for v in value)
    if key == "blackout":
        try:
            return [(float(a), float(b)) for a, b in value]
        except (TypeError, ValueError):
            raise ConfigError(path, "must be a list of [start, end] pairs", line)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"must be a string, got {value!r}", line)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"must be a list, got {value!r}", line)
        if default and all(isinstance(v, str) for v in default):
            if not all(isinstance(v, str) for v in value):
                raise ConfigError(path, "must be a list of strings", line)
            return list(value)
        if not all(_is_number(v) for v in value):
            raise ConfigError(path, "must be a list of numbers", line)
        return [float(v) for v in value]
    return value


def _build_section(section: str, values: dict, text: str):
    cls = SECTIONS[section]
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key", _locate(text, section, key))
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key), text)
    return replace(defaults, **kwargs)


def parse_text(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = _TOML_LINE.search(str(e))
        raise ConfigError("<file>", f"TOML syntax error: {e}", int(m.group(1)) if m else None)

    sections = {}
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section", _locate(text, section))
        if not isinstance(values, dict):
            raise ConfigError(section, "must be a table", _locate(text, section))
        sections[section] = _build_section(section, values, text)
    return ExperimentConfig(**sections)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Flag values (None = not given) replace file values."""
    exp = cfg.experiment
    channel = cfg.channel
    logging_cfg = cfg.logging
    if overrides.get("runs") is not None:
        exp = replace(exp, runs=int(overrides["runs"]))
    if overrides.get("full_scale"):
        exp = replace(exp, runs=FULL_SCALE_RUNS)
    if overrides.get("seed") is not None:
        exp = replace(exp, master_seed=int(overrides["seed"]))
    if overrides.get("algorithms") is not None:
        exp = replace(exp, algorithms=[a.strip() for a in overrides["algorithms"].split(",") if a.strip()])
    if overrides.get("output_dir") is not None:
        exp = replace(exp, output_dir=str(overrides["output_dir"]))
    if overrides.get("workers") is not None:
        exp = replace(exp, workers=int(overrides["workers"]))
    if overrides.get("delay_ceiling") is not None:
        ceiling = float(overrides["delay_ceiling"])
        channel = replace(channel, delay_ceiling=ceiling)
        exp = replace(exp, delay_cells=[ceiling])
    if overrides.get("log_level") is not None:
        logging_cfg = replace(logging_cfg, level=str(overrides["log_level"]).upper())
    return replace(cfg, experiment=exp, channel=channel, logging=logging_cfg)


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read, override and validate; any problem surfaces as ConfigError."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(str(p), f"cannot read config: {e.strerror or e}")
        cfg = parse_text(text)
        log.debug(f"Loaded config from {p}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
