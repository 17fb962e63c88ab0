"""Deterministic co-simulation loop, Monte Carlo batches and metrics."""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import pandas as pd

from core.baselines import AugmentedStateEkf, DelayIgnorantEkf, DelayIgnorantUkf
from core.channel import AcousticChannel, AcousticPacket
from core.config import ExperimentConfig
from core.errors import NavigationError
from core.fgo import FgoEstimator
from core.gp_residual import PriorResidual
from core.models import POS, KinematicModel
from core.scenario import Truth, generate_truth, noiseless_stream, sample_stream
from core.tskf import TwoSpeedFilter, make_tskf
from utils.logger import get_logger

log = get_logger("harness")

ALGORITHM_LABELS = {
    "tskf": "Proposed TSKF",
    "ekf": "Standard EKF",
    "ukf": "Standard UKF",
    "aug_ekf": "Aug-EKF",
    "fgo": "FGO",
}

DELIVERY_EPS = 1e-9
ACCURACY_COLUMNS = ["cell", "run", "seed", "algorithm", "rmse_m", "diverged", "failed", "error",
                    "updates", "rejected", "delay_min_s", "delay_mean_s", "delay_max_s", "stream_digest"]


# ─── Metrics ────────────────────────────────────────────────────


def rmse(estimated: np.ndarray, truth: np.ndarray) -> float:
    """sqrt(mean over steps of the squared 3-D position error)."""
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape != ref.shape:
        raise ValueError(f"Trajectory shapes differ: {est.shape} vs {ref.shape}")
    if est.shape[0] == 0:
        raise ValueError("Empty trajectories")
    return float(np.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def windowed_rmse(errors: np.ndarray, window: int) -> np.ndarray:
    """Trailing-window RMSE of per-step error norms."""
    sq = pd.Series(np.asarray(errors, dtype=float) ** 2)
    return np.sqrt(sq.rolling(window, min_periods=1).mean().to_numpy())


@dataclass
class DelayProfile:
    minimum: float = float("nan")
    mean: float = float("nan")
    maximum: float = float("nan")
    delivered: int = 0
    dropped: int = 0

    @classmethod
    def from_packets(cls, delays: list[float], dropped: int) -> "DelayProfile":
        if not delays:
            return cls(dropped=dropped)
        arr = np.asarray(delays)
        return cls(float(arr.min()), float(arr.mean()), float(arr.max()), len(delays), dropped)


@dataclass
class RunMetrics:
    algorithm: str
    cell: str
    run: int
    seed: int
    rmse: float = float("nan")
    step_time_ms_mean: float = float("nan")
    step_time_ms_p99: float = float("nan")
    delay: DelayProfile = field(default_factory=DelayProfile)
    diverged: bool = False
    failed: bool = False
    error: str = ""
    updates: int = 0
    rejected: int = 0
    flags: str = ""
    stream_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "cell": self.cell,
            "run": self.run,
            "seed": self.seed,
            "algorithm": self.algorithm,
            "rmse_m": self.rmse,
            "step_time_ms_mean": self.step_time_ms_mean,
            "step_time_ms_p99": self.step_time_ms_p99,
            "diverged": self.diverged,
            "failed": self.failed,
            "error": self.error,
            "updates": self.updates,
            "rejected": self.rejected,
            "flags": self.flags,
            "delay_min_s": self.delay.minimum,
            "delay_mean_s": self.delay.mean,
            "delay_max_s": self.delay.maximum,
            "stream_digest": self.stream_digest,
        }


@dataclass
class AlgorithmTrace:
    """Per-step estimate record of one algorithm in one run."""
    steps: np.ndarray
    positions: np.ndarray
    errors: np.ndarray
    events: list
    stats: dict
    gp_trace: list = field(default_factory=list)


@dataclass
class RunResult:
    metrics: dict[str, RunMetrics]
    truth: Truth
    channel_trace: list
    traces: dict[str, AlgorithmTrace]
    stream_digest: str


@dataclass
class BatchResult:
    cell: str
    runs: list[RunMetrics]
    seeds: list[int]

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.to_dict() for m in self.runs])

    def accuracy_frame(self) -> pd.DataFrame:
        """Everything except wall-clock timing; identical across repeated runs."""
        return self.frame()[ACCURACY_COLUMNS]

    def aggregate(self) -> pd.DataFrame:
        return aggregate_runs(self.frame())


def aggregate_runs(df: pd.DataFrame) -> pd.DataFrame:
    """Mean/std per (algorithm, cell); failed runs are excluded from accuracy and timing."""
    rows = []
    for (cell, algorithm), group in df.groupby(["cell", "algorithm"], sort=False):
        ok = group[~group["failed"]]
        rows.append({
            "algorithm": algorithm,
            "delay_s": cell,
            "rmse_m_mean": float(ok["rmse_m"].mean()) if len(ok) else float("nan"),
            "rmse_m_std": float(ok["rmse_m"].std(ddof=0)) if len(ok) else float("nan"),
            "step_time_ms_mean": float(ok["step_time_ms_mean"].mean()) if len(ok) else float("nan"),
            "step_time_ms_p99": float(ok["step_time_ms_p99"].mean()) if len(ok) else float("nan"),
            "diverged_frac": float(group["diverged"].mean()),
            "failed_frac": float(group["failed"].mean()),
        })
    return pd.DataFrame(rows)


# ─── Estimator Factory ──────────────────────────────────────────


def initial_estimate(cfg: ExperimentConfig, truth: Truth) -> tuple[np.ndarray, np.ndarray]:
    return truth.states[0].copy(), cfg.noise.initial_cov()


def build_estimator(name: str, cfg: ExperimentConfig, x0: np.ndarray, P0: np.ndarray):
    """Construct one algorithm; ResourceExhaustedError propagates to the caller."""
    dt = cfg.dt
    model = KinematicModel(q_base=cfg.noise.q_base(dt), input_noise=cfg.input_noise())
    meas = cfg.measurement()
    max_delay = cfg.channel.delay_ceiling
    prior = PriorResidual(cfg.gp.hyperparams, cfg.gp.correlation_time)

    if name == "tskf":
        settings = cfg.tskf
        residual = cfg.gp.build(dt, cfg.scenario.cruise_speed) if settings.use_gp else prior
        return make_tskf(model, meas, x0, P0, settings.build(dt, max_delay), residual, settings.concurrent)
    if name == "ekf":
        return DelayIgnorantEkf(model, meas, x0, P0, dt, residual=prior)
    if name == "ukf":
        return DelayIgnorantUkf(model, meas, x0, P0, dt, ut=cfg.ukf, residual=prior)
    if name == "aug_ekf":
        a = cfg.aug_ekf
        return AugmentedStateEkf(model, meas, x0, P0, dt, max_delay, lag_stride=a.lag_stride,
                                 memory_budget_mb=a.memory_budget_mb, residual=prior,
                                 gate_probability=a.gate_probability)
    if name == "fgo":
        residual = cfg.gp.build(dt, cfg.scenario.cruise_speed) if cfg.fgo.use_gp else prior
        return FgoEstimator(model, meas, x0, P0, dt, cfg.fgo, max_delay, residual=residual)
    raise ValueError(f"Unknown algorithm: {name}")


# ─── Single Run ─────────────────────────────────────────────────


def _stream_rngs(cfg: ExperimentConfig, seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    sensors = np.random.default_rng(np.random.SeedSequence([seed, cfg.scenario.seed]))
    channel = np.random.default_rng(np.random.SeedSequence([seed, cfg.channel.seed, 1]))
    return sensors, channel


def schedule_packets(cfg: ExperimentConfig, truth: Truth, rng: np.random.Generator,
                     noiseless: bool = False) -> tuple[dict[int, list[AcousticPacket]], AcousticChannel]:
    """Run the channel once; returns the packets maturing at each step."""
    R = cfg.noise.measurement_cov()
    if noiseless:
        R = np.zeros_like(R)
    channel = AcousticChannel(cfg.channel, rng, cfg.measurement(), R, cfg.dt)
    deliveries: dict[int, list[AcousticPacket]] = {}
    for k in range(1, len(truth)):
        if channel.is_broadcast_step(k) and not cfg.scenario.in_blackout(k * cfg.dt):
            channel.broadcast(truth[k])
        matured = channel.poll(k * cfg.dt + DELIVERY_EPS)
        if matured:
            deliveries[k] = matured
    return deliveries, channel


def replay(name: str, cfg: ExperimentConfig, truth: Truth, stream, deliveries: dict,
           keep_trace: bool = False) -> tuple[RunMetrics, Optional[AlgorithmTrace]]:
    """Drive one algorithm over the shared streams, timing every step in isolation."""
    metrics = RunMetrics(algorithm=name, cell="", run=0, seed=0)
    x0, P0 = initial_estimate(cfg, truth)
    try:
        est = build_estimator(name, cfg, x0, P0)
    except NavigationError as e:
        log.warning(f"{name} failed to start: {e}")
        metrics.failed = True
        metrics.error = str(e)
        return metrics, None

    n = len(truth) - 1
    positions = np.empty((n + 1, 3))
    positions[0] = x0[POS]
    durations = np.empty(n)
    k = 0
    try:
        for k in range(1, n + 1):
            u = stream.control(k)
            t0 = time.perf_counter()
            est.step(u)
            for pkt in deliveries.get(k, ()):
                est.on_packet(pkt, k)
            durations[k - 1] = time.perf_counter() - t0
            positions[k] = est.x[POS]
            if not np.all(np.isfinite(positions[k])):
                raise FloatingPointError(f"non-finite state at step {k}")
        if hasattr(est, "drain"):
            est.drain()
            positions[n] = est.estimate()[0][POS]
    except (NavigationError, FloatingPointError, np.linalg.LinAlgError) as e:
        log.warning(f"{name} failed at step {k}: {e}")
        metrics.failed = True
        metrics.error = str(e)
        return metrics, None
    finally:
        est.close()

    errors = np.linalg.norm(positions - truth.positions, axis=1)
    metrics.rmse = rmse(positions[1:], truth.positions[1:])
    metrics.diverged = metrics.rmse > cfg.experiment.divergence_threshold
    if hasattr(est, "fast_latencies") and est.fast_latencies:
        durations = np.asarray(est.fast_latencies)
    metrics.step_time_ms_mean = float(durations.mean() * 1e3)
    metrics.step_time_ms_p99 = float(np.percentile(durations, 99) * 1e3)
    metrics.updates = est.stats.updates
    metrics.rejected = est.stats.rejected
    metrics.flags = ";".join(est.stats.flags)

    trace = None
    if keep_trace:
        stride = cfg.experiment.trace_stride
        steps = np.arange(0, n + 1, stride)
        gp_rows = getattr(getattr(est, "residual", None), "trace", [])
        trace = AlgorithmTrace(steps, positions[steps], errors[steps],
                               [e.to_dict() for e in est.events], est.stats.to_dict(), list(gp_rows))
    return metrics, trace


def run_single(cfg: ExperimentConfig, seed: int, algorithms=None, run: int = 0,
               keep_trace: bool = False, noiseless: bool = False) -> RunResult:
    """One Monte Carlo realization: shared truth, sensor and packet streams, every algorithm."""
    algorithms = list(algorithms or cfg.experiment.algorithms)
    truth = generate_truth(cfg.scenario)
    sensor_rng, channel_rng = _stream_rngs(cfg, seed)
    stream = noiseless_stream(truth, cfg.sensors) if noiseless else sample_stream(truth, cfg.sensors, sensor_rng)
    deliveries, channel = schedule_packets(cfg, truth, channel_rng, noiseless)
    digest = stream.digest()

    delays = [p.delay for pkts in deliveries.values() for p in pkts]
    profile = DelayProfile.from_packets(delays, sum(r.dropped for r in channel.trace))
    cell = cell_label(cfg)

    metrics, traces = {}, {}
    for name in algorithms:
        m, trace = replay(name, cfg, truth, stream, deliveries, keep_trace)
        metrics[name] = replace(m, cell=cell, run=run, seed=seed, delay=profile, stream_digest=digest)
        if trace is not None:
            traces[name] = trace
    log.debug(f"Run {run} ({cell}) done: " + ", ".join(
        f"{n}={m.rmse:.2f}m" if not m.failed else f"{n}=FAIL" for n, m in metrics.items()))
    return RunResult(metrics, truth, channel.trace, traces, digest)


# ─── Batches ────────────────────────────────────────────────────


def cell_label(cfg: ExperimentConfig) -> str:
    if cfg.channel.delay_mode == "fixed":
        return f"{cfg.channel.delay_ceiling:g}"
    return "dynamic"


def derive_seeds(master_seed: int, n_runs: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(n_runs)
    return [int(child.generate_state(1)[0]) for child in children]


def _run_task(task) -> tuple[int, list[RunMetrics]]:
    cfg, run, seed = task
    result = run_single(cfg, seed, run=run)
    return run, list(result.metrics.values())


def run_batch(cfg: ExperimentConfig, n_runs: Optional[int] = None, workers: Optional[int] = None,
              progress_cb: Optional[Callable[[int, str], None]] = None) -> BatchResult:
    """n_runs independent realizations seeded from the master seed."""
    n_runs = cfg.experiment.runs if n_runs is None else n_runs
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    workers = cfg.experiment.workers if workers is None else workers
    seeds = derive_seeds(cfg.experiment.master_seed, n_runs)
    tasks = [(cfg, i, seed) for i, seed in enumerate(seeds)]
    cell = cell_label(cfg)
    log.info(f"Batch {cell}: {n_runs} run(s), {workers} worker(s)")

    results: dict[int, list[RunMetrics]] = {}
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_runs)) as pool:
            for done, (i, metrics) in enumerate(pool.map(_run_task, tasks), start=1):
                results[i] = metrics
                if progress_cb:
                    progress_cb(int(100 * done / n_runs), f"{cell}: run {done}/{n_runs}")
    else:
        for task in tasks:
            i, metrics = _run_task(task)
            results[i] = metrics
            if progress_cb:
                progress_cb(int(100 * (i + 1) / n_runs), f"{cell}: run {i + 1}/{n_runs}")

    runs = [m for i in sorted(results) for m in results[i]]
    return BatchResult(cell, runs, seeds)


def delay_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """Fixed-delay cells followed by the dynamic profile."""
    cells = [cfg.with_delay(float(d), "fixed") for d in cfg.experiment.delay_cells]
    if cfg.experiment.include_dynamic:
        cells.append(cfg.with_delay(max(cfg.experiment.delay_cells + [cfg.channel.delay_ceiling]), "dynamic"))
    return cells


def run_delay_grid(cfg: ExperimentConfig, progress_cb=None) -> list[BatchResult]:
    return [run_batch(cell, progress_cb=progress_cb) for cell in delay_cells(cfg)]


# ─── Focused Experiments ────────────────────────────────────────


@dataclass
class BlackoutResult:
    start: float
    end: float
    gp_terminal_error: float
    plain_terminal_error: float
    gp_max_variance: float
    prior_variance: float
    gp_trace: list

    @property
    def improvement(self) -> float:
        if self.plain_terminal_error == 0:
            return float("nan")
        return self.gp_terminal_error / self.plain_terminal_error


def run_blackout_experiment(cfg: ExperimentConfig, seed: int = 0, length: float = 120.0) -> BlackoutResult:
    """TSKF with and without the learned residual through a terminal acoustic blackout."""
    end = cfg.scenario.duration
    start = end - length
    scenario = replace(cfg.scenario, blackout=list(cfg.scenario.blackout) + [(start, end)])
    gp_cfg = replace(cfg, scenario=scenario, tskf=replace(cfg.tskf, use_gp=True, concurrent=False))
    plain_cfg = replace(gp_cfg, tskf=replace(gp_cfg.tskf, use_gp=False))

    truth = generate_truth(scenario)
    sensor_rng, channel_rng = _stream_rngs(cfg, seed)
    stream = sample_stream(truth, cfg.sensors, sensor_rng)
    deliveries, _ = schedule_packets(gp_cfg, truth, channel_rng)

    terminal = {}
    gp_filter = None
    for label, run_cfg in (("gp", gp_cfg), ("plain", plain_cfg)):
        x0, P0 = initial_estimate(run_cfg, truth)
        est = build_estimator("tskf", run_cfg, x0, P0)
        for k in range(1, len(truth)):
            est.step(stream.control(k))
            for pkt in deliveries.get(k, ()):
                est.on_packet(pkt, k)
        terminal[label] = float(np.linalg.norm(est.x[POS] - truth.positions[-1]))
        if label == "gp":
            gp_filter = est

    residual = gp_filter.residual
    log.info(f"Blackout {start:.0f}-{end:.0f}s: GP {terminal['gp']:.2f} m vs plain {terminal['plain']:.2f} m")
    return BlackoutResult(start, end, terminal["gp"], terminal["plain"], residual.max_variance,
                          cfg.gp.hyperparams.prior_variance, list(residual.trace))


@dataclass
class UpdateCost:
    delay_steps: int
    seconds: float


def measure_update_cost(cfg: ExperimentConfig, delays: list[int], repeats: int = 5) -> list[UpdateCost]:
    """Median wall time of one delayed update (retrieval, update and projection) per delay."""
    longest = max(delays)
    scenario = replace(cfg.scenario, duration=(longest + 1) * cfg.dt)
    truth = generate_truth(scenario)
    stream = noiseless_stream(truth, cfg.sensors)
    tskf_cfg = cfg.tskf.build(cfg.dt, longest * cfg.dt)
    x0, P0 = initial_estimate(cfg, truth)
    model = KinematicModel(q_base=cfg.noise.q_base(cfg.dt), input_noise=cfg.input_noise())
    filt = TwoSpeedFilter(model, cfg.measurement(), x0, P0, tskf_cfg,
                          PriorResidual(cfg.gp.hyperparams, cfg.gp.correlation_time))
    for k in range(1, len(truth)):
        filt.fast_predict(stream.control(k))

    R = cfg.noise.measurement_cov()
    out = []
    for d in delays:
        g = filt.k - d
        sample = truth[g]
        pkt = AcousticPacket(g, sample.time, cfg.measurement().measure(sample.state), R,
                             sample.time + d * cfg.dt, 0.0)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            filt._prepare(pkt, filt.k)
            times.append(time.perf_counter() - t0)
        out.append(UpdateCost(d, float(np.median(times))))
        log.debug(f"Delayed update at d={d}: {out[-1].seconds * 1e3:.3f} ms")
    return out
