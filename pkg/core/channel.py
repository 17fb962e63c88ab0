"""Parametric acoustic channel: distance-driven delay, Bernoulli loss, ordered delivery."""

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.errors import DegenerateBearingError
from utils.logger import get_logger

log = get_logger("channel")

DELAY_MODES = ("dynamic", "fixed")


# ─── Configuration ──────────────────────────────────────────────


@dataclass
class ChannelConfig:
    """Broadcast schedule and delay/loss statistics of the leader link."""
    sound_speed: float = 1500.0          # m/s
    broadcast_period: float = 5.0        # s
    loss_probability: float = 0.15
    delay_floor: float = 5.0             # s
    delay_ceiling: float = 30.0          # s
    queueing_slope: float = 0.075        # s/m, distance-scaled queueing inflation
    queueing_jitter_std: float = 0.5     # s
    delay_mode: str = "dynamic"          # dynamic profile or fixed = ceiling
    leader_position: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        if not 0.0 <= self.loss_probability < 1.0:
            problems.append(("loss_probability", "must be in [0, 1)"))
        if not self.sound_speed > 0:
            problems.append(("sound_speed", "must be > 0"))
        if not self.broadcast_period > 0:
            problems.append(("broadcast_period", "must be > 0"))
        if self.delay_floor < 0:
            problems.append(("delay_floor", "must be >= 0"))
        if not self.delay_floor <= self.delay_ceiling:
            problems.append(("delay_ceiling", "must be >= delay_floor"))
        if self.queueing_slope < 0:
            problems.append(("queueing_slope", "must be >= 0"))
        if self.queueing_jitter_std < 0:
            problems.append(("queueing_jitter_std", "must be >= 0"))
        if self.delay_mode not in DELAY_MODES:
            problems.append(("delay_mode", f"must be one of {DELAY_MODES}"))
        if len(self.leader_position) != 3:
            problems.append(("leader_position", "must have 3 components"))
        return problems


# ─── Packets ────────────────────────────────────────────────────


@dataclass
class AcousticPacket:
    """A delayed cooperative fix as the follower receives it."""
    gen_step: int
    gen_time: float
    payload: np.ndarray
    noise_cov: np.ndarray
    delivery_time: float
    distance: float = 0.0
    seq: int = 0

    @property
    def delay(self) -> float:
        return self.delivery_time - self.gen_time


@dataclass
class ChannelTraceRow:
    gen_time: float
    delivery_time: float
    delay: float
    distance: float
    dropped: bool

    def to_dict(self) -> dict:
        return {
            "gen_time": self.gen_time,
            "delivery_time": self.delivery_time,
            "delay": self.delay,
            "distance": self.distance,
            "dropped": self.dropped,
        }


# ─── Delay & Transmission ───────────────────────────────────────


def propagation_delay(distance: float, cfg: ChannelConfig, rng: Optional[np.random.Generator] = None) -> float:
    """Acoustic travel time plus affine queueing term, clamped to [floor, ceiling].

    Jitter is drawn only when rng is given and the std is positive.
    """
    if distance < 0:
        raise ValueError(f"Distance must be >= 0, got {distance}")
    jitter = 0.0
    if rng is not None and cfg.queueing_jitter_std > 0:
        jitter = rng.normal(0.0, cfg.queueing_jitter_std)
    return _clamped_delay(distance, cfg, jitter)


def _clamped_delay(distance: float, cfg: ChannelConfig, jitter: float) -> float:
    delay = cfg.delay_floor + distance / cfg.sound_speed + cfg.queueing_slope * distance + jitter
    return float(min(max(delay, cfg.delay_floor), cfg.delay_ceiling))


def leader_distance(state: np.ndarray, cfg: ChannelConfig) -> float:
    return float(np.linalg.norm(state[:3] - np.asarray(cfg.leader_position, dtype=float)))


def transmit(
    truth_sample,
    cfg: ChannelConfig,
    rng: np.random.Generator,
    measurement,
    R: np.ndarray,
) -> Optional[AcousticPacket]:
    """One broadcast epoch: Bernoulli loss, noisy payload, delayed delivery.

    Returns None when the packet is lost. Every draw is made whether or not
    the packet survives, so streams stay aligned across loss and delay settings.
    """
    lost = rng.random() < cfg.loss_probability
    noise = rng.multivariate_normal(np.zeros(R.shape[0]), R) if np.any(R) else np.zeros(R.shape[0])
    jitter = rng.normal(0.0, cfg.queueing_jitter_std) if cfg.queueing_jitter_std > 0 else 0.0

    distance = leader_distance(truth_sample.state, cfg)
    if cfg.delay_mode == "fixed":
        delay = cfg.delay_ceiling
    else:
        delay = _clamped_delay(distance, cfg, jitter)

    if lost:
        return None
    try:
        payload = measurement.measure(truth_sample.state) + noise
    except DegenerateBearingError:
        log.debug(f"Broadcast at step {truth_sample.step} dropped: bearing undefined")
        return None

    return AcousticPacket(
        gen_step=truth_sample.step,
        gen_time=truth_sample.time,
        payload=payload,
        noise_cov=R,
        delivery_time=truth_sample.time + delay,
        distance=distance,
    )


# ─── Delivery Queue ─────────────────────────────────────────────


class PacketQueue:
    """Pending packets ordered by delivery time, then generation step."""

    def __init__(self):
        self._heap: list = []
        self._counter = itertools.count()

    def push(self, packet: AcousticPacket) -> None:
        packet.seq = next(self._counter)
        heapq.heappush(self._heap, (packet.delivery_time, packet.gen_step, packet.seq, packet))

    def peek_time(self) -> Optional[float]:
        if self._heap:
            return self._heap[0][0]
        return None

    def pop_matured(self, now: float) -> list[AcousticPacket]:
        out = []
        while self._heap and self._heap[0][0] <= now:
            out.append(heapq.heappop(self._heap)[3])
        return out

    def __len__(self) -> int:
        return len(self._heap)


def poll_delivered(queue: PacketQueue, now: float) -> list[AcousticPacket]:
    """Remove and return every packet with delivery_time <= now, in delivery order."""
    return queue.pop_matured(now)


# ─── Channel ────────────────────────────────────────────────────


@dataclass
class AcousticChannel:
    """Broadcast schedule plus delivery queue and trace for one run."""
    cfg: ChannelConfig
    rng: np.random.Generator
    measurement: object
    R: np.ndarray
    dt: float
    queue: PacketQueue = field(default_factory=PacketQueue)
    trace: list = field(default_factory=list)

    @property
    def period_steps(self) -> int:
        return max(1, int(round(self.cfg.broadcast_period / self.dt)))

    def is_broadcast_step(self, k: int) -> bool:
        return k > 0 and k % self.period_steps == 0

    def broadcast(self, truth_sample) -> Optional[AcousticPacket]:
        pkt = transmit(truth_sample, self.cfg, self.rng, self.measurement, self.R)
        if pkt is None:
            distance = leader_distance(truth_sample.state, self.cfg)
            self.trace.append(ChannelTraceRow(truth_sample.time, float("nan"), float("nan"), distance, True))
            return None
        self.trace.append(ChannelTraceRow(pkt.gen_time, pkt.delivery_time, pkt.delay, pkt.distance, False))
        self.queue.push(pkt)
        return pkt

    def poll(self, now: float) -> list[AcousticPacket]:
        return poll_delivered(self.queue, now)

    @property
    def loss_rate(self) -> float:
        if not self.trace:
            return 0.0
        return sum(r.dropped for r in self.trace) / len(self.trace)
