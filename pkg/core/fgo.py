"""Sliding-window factor-graph smoother over a delay-spanning window of nodes.

Nodes sit on a coarse grid of fast steps and hold error states relative to a
GP-compensated dead-reckoning chain. Odometry factors compose the buffered
transitions between nodes; delayed fixes anchor at their generation step
through the partial composition from the preceding node. Every fast step the
whole window is re-solved with a transient head node at the present, tied to
the newest node by the odometry accumulated since. The oldest node is
marginalized into a prior on its successor when the window slides.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import ClassVar, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from core.errors import DegenerateBearingError
from core.estimator import Estimator
from core.gp_residual import GpResidual
from core.models import POS, KinematicModel
from core.state_buffer import BufferEntry, CircularBuffer
from core.tskf import covariance_fast_forward
from utils.linalg import symmetrize
from utils.logger import get_logger

log = get_logger("fgo")

WINDOW_POLICIES = ("delay_spanning",)
INITIAL_DAMPING = 1e-6
DAMPING_FACTOR = 10.0
MAX_DAMPING = 1e6
INFO_JITTER = 1e-9
HEAD_ID = -1


# ─── Configuration ──────────────────────────────────────────────


@dataclass
class FgoConfig:
    max_iterations: int = 10
    convergence_tol: float = 1e-6
    window_policy: str = "delay_spanning"
    node_period: float = 1.0        # s between graph nodes
    solve_every_steps: int = 1      # fast steps between window re-solves
    use_gp: bool = True

    def validate(self) -> list[tuple[str, str]]:
        problems = []
        if self.max_iterations < 1:
            problems.append(("max_iterations", "must be >= 1"))
        if not self.convergence_tol > 0:
            problems.append(("convergence_tol", "must be > 0"))
        if self.window_policy not in WINDOW_POLICIES:
            problems.append(("window_policy", f"must be one of {', '.join(WINDOW_POLICIES)}"))
        if not self.node_period > 0:
            problems.append(("node_period", "must be > 0"))
        if self.solve_every_steps < 1:
            problems.append(("solve_every_steps", "must be >= 1"))
        return problems


# ─── Graph Elements ─────────────────────────────────────────────


@dataclass
class FgoNode:
    node_id: int
    step: int
    xbar: np.ndarray                # linearization point on the DR chain
    error: np.ndarray               # optimized offset from xbar


@dataclass
class PriorFactor:
    node_id: int
    mean: np.ndarray
    info: np.ndarray
    linear: ClassVar[bool] = True

    def linearize(self, errors: dict) -> tuple[np.ndarray, dict]:
        return errors[self.node_id] - self.mean, {self.node_id: np.eye(len(self.mean))}


@dataclass
class OdometryFactor:
    src: int
    dst: int
    phi: np.ndarray
    info: np.ndarray
    linear: ClassVar[bool] = True

    def linearize(self, errors: dict) -> tuple[np.ndarray, dict]:
        r = errors[self.dst] - self.phi @ errors[self.src]
        return r, {self.dst: np.eye(self.phi.shape[0]), self.src: -self.phi}


@dataclass
class MeasurementFactor:
    node_id: int
    gen_step: int
    phi: np.ndarray                 # node step -> generation step
    xbar: np.ndarray                # DR chain state at the generation step
    z: np.ndarray
    info: np.ndarray
    model: object = field(repr=False)
    measurement: object = field(repr=False)
    linear: ClassVar[bool] = False

    def state(self, errors: dict) -> np.ndarray:
        return self.model.normalize(self.xbar + self.phi @ errors[self.node_id])

    def linearize(self, errors: dict) -> tuple[np.ndarray, dict]:
        x = self.state(errors)
        r = self.measurement.residual(self.measurement.measure(x), self.z)
        return r, {self.node_id: self.measurement.jacobian(x) @ self.phi}


@dataclass
class FgoResult:
    nodes: list[FgoNode]
    cost_history: list[float]
    iterations: int
    converged: bool
    information: np.ndarray
    damping: float = 0.0


@dataclass
class LinearBlock:
    """Normal equations of the factors whose Jacobians do not depend on the errors.

    Cost is e^T N e + 2 h^T e + c and the gradient N e + h.
    """
    N: np.ndarray
    h: np.ndarray
    c: float = 0.0

    def padded(self, size: int) -> "LinearBlock":
        m = len(self.h)
        N = np.zeros((size, size))
        N[:m, :m] = self.N
        h = np.zeros(size)
        h[:m] = self.h
        return LinearBlock(N, h, self.c)

    def evaluate(self, e: np.ndarray) -> tuple[np.ndarray, float]:
        Ne = self.N @ e
        return Ne + self.h, float(e @ (Ne + 2.0 * self.h)) + self.c


def information_from_covariance(C: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of a covariance; returns (info, reconditioned)."""
    C = symmetrize(np.atleast_2d(C))
    eye = np.eye(C.shape[0])
    try:
        return cho_solve(cho_factor(C, lower=True), eye), False
    except LinAlgError:
        return cho_solve(cho_factor(C + INFO_JITTER * eye, lower=True), eye), True


# ─── Gauss-Newton / Levenberg-Marquardt ─────────────────────────


def _accumulate(N: np.ndarray, g: np.ndarray, factor, r: np.ndarray, blocks: dict, index: dict, n: int) -> float:
    Wr = factor.info @ r
    items = [(index[nid] * n, J) for nid, J in blocks.items()]
    for a, Ja in items:
        g[a:a + n] += Ja.T @ Wr
        JaW = Ja.T @ factor.info
        for b, Jb in items:
            N[a:a + n, b:b + n] += JaW @ Jb
    return float(r @ Wr)


def _stack(nodes: list[FgoNode], errors: dict) -> np.ndarray:
    return np.concatenate([errors[node.node_id] for node in nodes])


def linear_block(nodes: list[FgoNode], factors: list, base: Optional[LinearBlock] = None) -> LinearBlock:
    """Accumulate the linear factors at zero error, on top of base when given."""
    n = len(nodes[0].error)
    size = len(nodes) * n
    block = LinearBlock(np.zeros((size, size)), np.zeros(size)) if base is None else base.padded(size)
    index = {node.node_id: i for i, node in enumerate(nodes)}
    zeros = {node.node_id: np.zeros(n) for node in nodes}
    for factor in factors:
        if factor.linear:
            r0, blocks = factor.linearize(zeros)
            block.c += _accumulate(block.N, block.h, factor, r0, blocks, index, n)
    return block


def _assemble(nodes: list[FgoNode], factors: list, errors: dict, linear: Optional[LinearBlock] = None):
    n = len(nodes[0].error)
    index = {node.node_id: i for i, node in enumerate(nodes)}
    if linear is None:
        N = np.zeros((len(nodes) * n, len(nodes) * n))
        g = np.zeros(len(nodes) * n)
        cost = 0.0
    else:
        g, cost = linear.evaluate(_stack(nodes, errors))
        N = linear.N.copy()
        factors = [f for f in factors if not f.linear]
    for factor in factors:
        r, blocks = factor.linearize(errors)
        cost += _accumulate(N, g, factor, r, blocks, index, n)
    return N, g, cost


def _cost(nodes: list[FgoNode], factors: list, errors: dict, linear: Optional[LinearBlock] = None) -> float:
    total = 0.0
    if linear is not None:
        _, total = linear.evaluate(_stack(nodes, errors))
        factors = [f for f in factors if not f.linear]
    for factor in factors:
        r, _ = factor.linearize(errors)
        total += float(r @ factor.info @ r)
    return total


def fgo_window_optimize(nodes: list[FgoNode], factors: list, cfg: FgoConfig,
                        linear: Optional[LinearBlock] = None) -> FgoResult:
    """Minimize the summed weighted squared residuals over the node error states.

    Plain Gauss-Newton steps; a Levenberg term lambda*I is added only when the
    normal equations cannot be factored or a step fails to lower the cost.
    Only cost-decreasing iterates are accepted. With `linear`, the prior and
    odometry factors come from that precomputed block and only the
    measurement factors are relinearized.
    """
    if not nodes:
        raise ValueError("Factor graph has no nodes")
    n = len(nodes[0].error)
    errors = {node.node_id: node.error.copy() for node in nodes}
    N, g, cost = _assemble(nodes, factors, errors, linear)
    history = [cost]
    damping = 0.0
    converged = False
    iterations = 0

    while iterations < cfg.max_iterations:
        iterations += 1
        try:
            chol = cho_factor(N + damping * np.eye(len(g)), lower=True)
        except LinAlgError:
            damping = INITIAL_DAMPING if damping == 0.0 else damping * DAMPING_FACTOR
            if damping > MAX_DAMPING:
                break
            continue
        delta = -cho_solve(chol, g)
        trial = {node.node_id: errors[node.node_id] + delta[i * n:(i + 1) * n] for i, node in enumerate(nodes)}
        try:
            trial_cost = _cost(nodes, factors, trial, linear)
        except DegenerateBearingError:
            trial_cost = math.inf

        if trial_cost <= cost:
            decrease = cost - trial_cost
            errors = trial
            N, g, cost = _assemble(nodes, factors, errors, linear)
            history.append(cost)
            if damping > INITIAL_DAMPING:
                damping /= DAMPING_FACTOR
            if decrease < cfg.convergence_tol or float(np.max(np.abs(delta), initial=0.0)) < 1e-12:
                converged = True
                break
        elif trial_cost - cost < cfg.convergence_tol:
            # at the minimum to within round-off
            converged = True
            break
        else:
            damping = INITIAL_DAMPING if damping == 0.0 else damping * DAMPING_FACTOR
            if damping > MAX_DAMPING:
                break

    out = [FgoNode(node.node_id, node.step, node.xbar, errors[node.node_id]) for node in nodes]
    return FgoResult(out, history, iterations, converged, N, damping)


def recover_covariance(information: np.ndarray) -> np.ndarray:
    """Joint covariance of every node in the window."""
    eye = np.eye(information.shape[0])
    try:
        return cho_solve(cho_factor(information, lower=True), eye)
    except LinAlgError:
        return np.linalg.pinv(information)


# ─── Estimator ──────────────────────────────────────────────────


def window_nodes(max_delay: float, node_period: float) -> int:
    """Nodes kept so a fix max_delay old still has an anchor node."""
    return int(math.ceil(round(max_delay / node_period, 9))) + 2


class FgoEstimator(Estimator):
    """Factor-graph baseline re-solved over the full window every fast step."""

    name = "fgo"

    def __init__(self, model, measurement, x0, P0, dt, config: FgoConfig | None = None,
                 max_delay: float = 30.0, residual=None):
        super().__init__(model, measurement, x0, P0, dt)
        self.config = config or FgoConfig()
        self.residual = residual
        self.stride = max(1, int(round(self.config.node_period / dt)))
        self.max_nodes = window_nodes(max_delay, self.stride * dt)
        self.buffer = CircularBuffer(self.max_nodes * self.stride + 1, model.dim)
        self._kinematic = isinstance(model, KinematicModel)
        self._learns = (isinstance(residual, GpResidual) and self._kinematic
                        and hasattr(measurement, "to_position"))
        self._odom = np.zeros(3)

        self._xbar = self.x.copy()
        self.buffer.push(BufferEntry(0, self._xbar.copy(), np.zeros_like(self.P),
                                     np.eye(model.dim), np.zeros_like(self.P), self._odom.copy()))
        self.nodes: deque[FgoNode] = deque([FgoNode(0, 0, self._xbar.copy(), np.zeros(model.dim))])
        info, _ = information_from_covariance(self.P)
        self.factors: list = [PriorFactor(0, np.zeros(model.dim), info)]
        self._next_id = 1
        self._linear: Optional[LinearBlock] = None
        self._marginals: dict[int, np.ndarray] = {0: self.P.copy()}
        self._head_error: Optional[np.ndarray] = None
        self._solved_at = 0
        self._phi_head = np.eye(model.dim)
        self._q_head = np.zeros_like(self.P)
        self.solve_count = 0
        self.nonconverged = 0
        log.debug(f"FGO ready: {self.max_nodes} nodes every {self.stride} steps")

    # ── Fast path ──

    def step(self, u, dt: Optional[float] = None) -> None:
        dt = self.dt if dt is None else dt
        xb = self._xbar
        F = self.model.jacobian(xb, u, dt)
        Q = self.model.process_noise(xb, u, dt)
        x_next = self.model.step(xb, u, dt)
        if self._kinematic:
            self._odom = self._odom + (x_next[POS] - xb[POS])
            if self.residual is not None:
                shift, sigma = self.residual.compensate(self.x, dt, self.k + 1)
                if shift is not None:
                    x_next[POS] += shift
                Q = Q + sigma
        self._xbar = self.model.normalize(x_next)
        self.k += 1
        self.buffer.push(BufferEntry(self.k, self._xbar.copy(), self.P, F, Q, self._odom.copy()))
        self._phi_head = F @ self._phi_head
        self._q_head = F @ self._q_head @ F.T + Q

        if self.k % self.stride == 0:
            self._add_node()
        elif self.k % self.config.solve_every_steps == 0:
            self._optimize()
        self._publish()

    def _add_node(self) -> None:
        last = self.nodes[-1]
        info, reconditioned = information_from_covariance(self._q_head)
        if reconditioned:
            self.stats.flag("odometry_jitter")
        node = FgoNode(self._next_id, self.k, self._xbar.copy(), self._phi_head @ last.error)
        self.factors.append(OdometryFactor(last.node_id, node.node_id, self._phi_head.copy(), info))
        self.nodes.append(node)
        self._next_id += 1
        self._phi_head = np.eye(self.model.dim)
        self._q_head = np.zeros_like(self._q_head)
        self._linear = None
        if len(self.nodes) > self.max_nodes:
            self._marginalize_oldest()
        self._optimize()

    def _head(self) -> tuple[Optional[FgoNode], Optional[OdometryFactor]]:
        """Transient node at the present, tied to the newest node by the tail odometry."""
        last = self.nodes[-1]
        if self.k == last.step:
            return None, None
        info, _ = information_from_covariance(self._q_head)
        head = FgoNode(HEAD_ID, self.k, self._xbar.copy(), self._phi_head @ last.error)
        return head, OdometryFactor(last.node_id, HEAD_ID, self._phi_head.copy(), info)

    def _publish(self) -> None:
        if self._solved_at == self.k and self._head_error is not None:
            self.x = self.model.normalize(self._xbar + self._head_error)
            self.P = self._marginals[HEAD_ID]
            return
        last = self.nodes[-1]
        self.x = self.model.normalize(self._xbar + self._phi_head @ last.error)
        self.P = symmetrize(self._phi_head @ self._marginals[last.node_id] @ self._phi_head.T + self._q_head)

    # ── Slow path ──

    def on_packet(self, pkt, recv_step: Optional[int] = None) -> None:
        g = pkt.gen_step
        anchor = None
        for node in reversed(self.nodes):
            if node.step <= g:
                anchor = node
                break
        if anchor is None or g > self.k or not self.buffer.retains(g):
            self.stats.rejected += 1
            self.stats.not_retained += 1
            self._record(pkt, 0.0, float("nan"), False, "not_retained")
            return

        phi = self.buffer.stm_product(anchor.step, g)
        q_partial = covariance_fast_forward(self.buffer, np.zeros_like(self.P), anchor.step, g)
        entry = self.buffer.lookup(g)
        x_g = self.model.normalize(entry.x_pred + phi @ anchor.error)
        z = np.asarray(pkt.payload, dtype=float)
        try:
            H = self.measurement.jacobian(x_g)
            y = self.measurement.residual(z, self.measurement.measure(x_g))
        except DegenerateBearingError:
            self.stats.rejected += 1
            self.stats.degenerate += 1
            self._record(pkt, 0.0, float("nan"), False, "degenerate")
            return

        R_eff = pkt.noise_cov + H @ q_partial @ H.T
        info, _ = information_from_covariance(R_eff)
        anchor_cov = self._marginals[anchor.node_id]
        S = symmetrize(H @ phi @ anchor_cov @ phi.T @ H.T + R_eff)
        nis = float(y @ np.linalg.solve(S, y))

        factor = MeasurementFactor(anchor.node_id, g, phi, entry.x_pred, z, info, self.model, self.measurement)
        self.factors.append(factor)
        x_before = self.x.copy()
        self._optimize()
        self._publish()
        self.stats.updates += 1
        self._record(pkt, float(np.linalg.norm(self.model.difference(self.x, x_before))), nis, True)
        if self._learns:
            self._learn_from_fix(factor, entry.odom)

    def _learn_from_fix(self, factor: MeasurementFactor, odom: np.ndarray) -> None:
        errors = {node.node_id: node.error for node in self.nodes}
        if factor.node_id not in errors:
            return
        fix = self.measurement.to_position(factor.z)
        pair = self.residual.training_pair(factor.gen_step, fix, odom, factor.state(errors))
        if pair is not None:
            self.residual.observe(*pair)

    # ── Optimization & marginalization ──

    def _optimize(self) -> None:
        nodes = list(self.nodes)
        if self._linear is None:
            self._linear = linear_block(nodes, self.factors)
        factors, linear = self.factors, self._linear
        head, tail = self._head()
        if head is not None:
            nodes.append(head)
            factors = factors + [tail]
            linear = linear_block(nodes, [tail], base=self._linear)

        result = fgo_window_optimize(nodes, factors, self.config, linear)
        self.solve_count += 1
        if not result.converged:
            self.nonconverged += 1
            self.stats.flag("fgo_nonconverged")
        if result.damping > 0.0:
            log.warning(f"FGO needed damping {result.damping:.1e} at step {self.k}")

        cov = recover_covariance(result.information)
        n = self.model.dim
        self._marginals = {node.node_id: symmetrize(cov[i * n:(i + 1) * n, i * n:(i + 1) * n])
                           for i, node in enumerate(result.nodes)}
        solved = result.nodes
        self._head_error = None
        if head is not None:
            self._head_error = solved[-1].error
            solved = solved[:-1]
        self.nodes = deque(solved)
        self._solved_at = self.k

    def _marginalize_oldest(self) -> None:
        """Schur-complement the oldest node into a prior on its successor."""
        old, nxt = self.nodes[0], self.nodes[1]
        n = self.model.dim
        local = [f for f in self.factors if _touches(f, old.node_id)]
        errors = {old.node_id: old.error, nxt.node_id: nxt.error}
        pair = [old, nxt]
        N, g, _ = _assemble(pair, local, errors)
        A, B, C = N[:n, :n], N[:n, n:], N[n:, n:]
        try:
            A_inv_B = np.linalg.solve(A, B)
            A_inv_g = np.linalg.solve(A, g[:n])
        except np.linalg.LinAlgError:
            A_inv_B = np.linalg.pinv(A) @ B
            A_inv_g = np.linalg.pinv(A) @ g[:n]
        info = symmetrize(C - B.T @ A_inv_B)
        grad = g[n:] - B.T @ A_inv_g
        mean = nxt.error - np.linalg.lstsq(info, grad, rcond=None)[0]

        dropped = sum(isinstance(f, MeasurementFactor) for f in local)
        self.factors = [f for f in self.factors if not _touches(f, old.node_id)]
        self.factors.insert(0, PriorFactor(nxt.node_id, mean, info))
        self.nodes.popleft()
        self._linear = None
        if dropped:
            log.debug(f"Marginalized node {old.node_id} with {dropped} fix factor(s)")


def _touches(factor, node_id: int) -> bool:
    if isinstance(factor, OdometryFactor):
        return node_id in (factor.src, factor.dst)
    return factor.node_id == node_id
