"""Tests for the co-simulation harness, batches and focused experiments."""

import sys
sys.path.insert(0, ".")

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from core.config import ExperimentConfig
from core.harness import (
    aggregate_runs,
    build_estimator,
    cell_label,
    delay_cells,
    derive_seeds,
    initial_estimate,
    measure_update_cost,
    rmse,
    run_batch,
    run_blackout_experiment,
    run_single,
    schedule_packets,
    windowed_rmse,
)
from core.scenario import generate_truth, sample_stream
from utils.linalg import is_covariance


def _make_config(duration=20.0, ceiling=10.0, mode="fixed", algorithms=("tskf", "ekf"), **scenario) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg = replace(
        cfg,
        scenario=replace(cfg.scenario, duration=duration, **scenario),
        experiment=replace(cfg.experiment, algorithms=list(algorithms), runs=2, delay_cells=[ceiling]),
    )
    return cfg.with_delay(ceiling, mode).validate()


def _make_noiseless_config(duration=30.0, algorithms=("tskf", "aug_ekf", "fgo"), **scenario):
    cfg = _make_config(duration, ceiling=5.0, algorithms=algorithms, current_velocity=(0.0, 0.0, 0.0), **scenario)
    return replace(cfg, sensors=replace(cfg.sensors, dvl_reference="bottom"),
                   channel=replace(cfg.channel, loss_probability=0.0, queueing_jitter_std=0.0))


def _drive(cfg: ExperimentConfig, name: str = "tskf", seed: int = 0, on_step=None):
    """Replay one estimator over freshly sampled streams; on_step(est) after every step."""
    truth = generate_truth(cfg.scenario)
    stream = sample_stream(truth, cfg.sensors, np.random.default_rng(seed))
    deliveries, _ = schedule_packets(cfg, truth, np.random.default_rng(seed + 1))
    x0, P0 = initial_estimate(cfg, truth)
    est = build_estimator(name, cfg, x0, P0)
    try:
        for k in range(1, len(truth)):
            est.step(stream.control(k))
            for pkt in deliveries.get(k, ()):
                est.on_packet(pkt, k)
            if on_step is not None:
                on_step(est)
    finally:
        est.close()
    return est


# ─── Metrics ────────────────────────────────────────────────────


class TestRmse:
    def test_constant_offset(self):
        truth = np.zeros((10, 3))
        est = np.tile([3.0, 4.0, 0.0], (10, 1))
        assert rmse(est, truth) == pytest.approx(5.0)

    def test_mixed_errors(self):
        est = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
        assert rmse(est, np.zeros((2, 3))) == pytest.approx(np.sqrt(12.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_empty(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_windowed_constant(self):
        assert_allclose(windowed_rmse(np.full(20, 2.0), 5), np.full(20, 2.0))

    def test_windowed_trailing(self):
        out = windowed_rmse(np.array([0.0, 0.0, 4.0]), 2)
        assert_allclose(out, [0.0, 0.0, np.sqrt(8.0)])


class TestAggregate:
    def _frame(self):
        rows = []
        for run in range(4):
            rows.append({"cell": "10", "algorithm": "tskf", "rmse_m": 2.0, "step_time_ms_mean": 0.1,
                         "step_time_ms_p99": 0.2, "diverged": False, "failed": False})
            rows.append({"cell": "10", "algorithm": "aug_ekf", "rmse_m": float("nan"), "step_time_ms_mean": float("nan"),
                         "step_time_ms_p99": float("nan"), "diverged": False, "failed": True})
        return pd.DataFrame(rows)

    def test_constant_runs(self):
        agg = aggregate_runs(self._frame())
        row = agg[agg["algorithm"] == "tskf"].iloc[0]
        assert row["rmse_m_mean"] == pytest.approx(2.0)
        assert row["rmse_m_std"] == pytest.approx(0.0)
        assert row["delay_s"] == "10"

    def test_failed_runs(self):
        agg = aggregate_runs(self._frame())
        row = agg[agg["algorithm"] == "aug_ekf"].iloc[0]
        assert row["failed_frac"] == pytest.approx(1.0)
        assert np.isnan(row["rmse_m_mean"])


# ─── Single Run ─────────────────────────────────────────────────


class TestSchedulePackets:
    def test_delivery_after_generation_plus_delay(self):
        cfg = _make_config(duration=60.0, ceiling=10.0)
        truth = generate_truth(cfg.scenario)
        deliveries, channel = schedule_packets(cfg, truth, np.random.default_rng(0))
        for k, pkts in deliveries.items():
            for p in pkts:
                assert k * cfg.dt + 1e-9 >= p.delivery_time
                assert (k - 1) * cfg.dt < p.delivery_time
                assert p.delay == pytest.approx(10.0)
        assert len(channel.trace) == 12

    def test_blackout_suppresses_broadcasts(self):
        cfg = _make_config(duration=60.0, blackout=[(0.0, 61.0)])
        truth = generate_truth(cfg.scenario)
        deliveries, channel = schedule_packets(cfg, truth, np.random.default_rng(0))
        assert deliveries == {}
        assert channel.trace == []


class TestRunSingle:
    def test_noiseless_closure_without_fixes(self):
        cfg = _make_noiseless_config(algorithms=("tskf", "ekf", "aug_ekf", "fgo"), blackout=[(0.0, 31.0)])
        result = run_single(cfg, seed=1, noiseless=True)
        for name, m in result.metrics.items():
            assert not m.failed, name
            assert m.rmse < 1e-6, name

    def test_noiseless_closure_with_delayed_fixes(self):
        cfg = _make_noiseless_config()
        result = run_single(cfg, seed=1, noiseless=True)
        for name, m in result.metrics.items():
            assert not m.failed, name
            assert m.updates > 0, name
            assert m.rmse < 1e-6, name

    def test_metrics_fields(self):
        cfg = _make_config()
        cfg = replace(cfg, channel=replace(cfg.channel, loss_probability=0.0))
        result = run_single(cfg, seed=7, run=3)
        m = result.metrics["tskf"]
        assert m.cell == "10"
        assert m.run == 3
        assert m.seed == 7
        assert m.step_time_ms_mean > 0
        assert m.stream_digest == result.stream_digest
        assert m.delay.maximum == pytest.approx(10.0)

    def test_same_streams_for_every_algorithm(self):
        cfg = _make_config()
        result = run_single(cfg, seed=3)
        digests = {m.stream_digest for m in result.metrics.values()}
        assert len(digests) == 1

    def test_aug_ekf_over_budget_marked_failed(self):
        cfg = _make_config(ceiling=30.0, algorithms=("aug_ekf",))
        m = run_single(cfg, seed=0).metrics["aug_ekf"]
        assert m.failed
        assert "MB" in m.error

    def test_trace_kept(self):
        cfg = _make_config(duration=10.0)
        result = run_single(cfg, seed=0, keep_trace=True)
        trace = result.traces["tskf"]
        assert trace.steps[0] == 0
        assert trace.steps[1] == cfg.experiment.trace_stride
        assert trace.positions.shape == (len(trace.steps), 3)

    def test_delay_aware_beats_delay_ignorant(self):
        cfg = _make_config(duration=200.0, ceiling=20.0)
        result = run_single(cfg, seed=11)
        assert result.metrics["tskf"].rmse < result.metrics["ekf"].rmse


class TestResidualLearning:
    @pytest.mark.parametrize("ceiling", [10.0, 30.0])
    def test_gp_window_fills_in_fixed_cells(self, ceiling):
        cfg = _make_config(duration=200.0, ceiling=ceiling, algorithms=("tskf",))
        est = _drive(cfg)
        assert est.stats.updates > 0
        assert len(est.residual.window) > 0

    def test_fgo_learns_residual_too(self):
        cfg = _make_config(duration=120.0, ceiling=10.0, algorithms=("fgo",))
        est = _drive(cfg, "fgo")
        assert len(est.residual.window) > 0


class TestDelayOrdering:
    """Reduced-scale version of the delay grid on the default survey."""

    @pytest.fixture(scope="class")
    def grid(self):
        base = ExperimentConfig()
        out = {}
        for d in (10.0, 20.0, 30.0):
            cell = base.with_delay(d, "fixed")
            out[d] = [run_single(cell, seed, ["tskf", "ekf"]).metrics for seed in derive_seeds(0, 2)]
        return out

    def _mean(self, grid, d, name):
        return float(np.mean([m[name].rmse for m in grid[d]]))

    def test_ekf_far_worse_at_twenty_seconds(self, grid):
        assert self._mean(grid, 20.0, "ekf") >= 5.0 * self._mean(grid, 20.0, "tskf")

    def test_ekf_diverges_at_thirty_seconds(self, grid):
        assert np.mean([m["ekf"].diverged for m in grid[30.0]]) >= 0.5

    def test_tskf_bounded_at_thirty_seconds(self, grid):
        tskf30 = self._mean(grid, 30.0, "tskf")
        assert tskf30 <= 4.0
        assert tskf30 <= 2.5 * self._mean(grid, 10.0, "tskf")
        assert not any(m["tskf"].diverged for d in grid for m in grid[d])


class TestCovarianceHygiene:
    def test_psd_through_dynamic_delay_run(self):
        cfg = ExperimentConfig().with_delay(30.0, "dynamic").validate()
        bad = []
        est = _drive(cfg, on_step=lambda e: bad.append(e.k) if not is_covariance(e.P) else None)
        assert est.k == int(round(cfg.scenario.duration / cfg.dt))
        assert est.stats.updates > 50
        assert bad == []


class TestBuildEstimator:
    def test_every_algorithm(self):
        cfg = _make_config(ceiling=5.0)
        truth = generate_truth(cfg.scenario)
        x0, P0 = initial_estimate(cfg, truth)
        for name in ("tskf", "ekf", "ukf", "aug_ekf", "fgo"):
            est = build_estimator(name, cfg, x0, P0)
            assert est.name == name
            est.close()

    def test_unknown(self):
        cfg = _make_config()
        with pytest.raises(ValueError):
            build_estimator("pf", cfg, np.zeros(9), np.eye(9))


# ─── Batches ────────────────────────────────────────────────────


class TestBatches:
    def test_seeds_reproducible_and_distinct(self):
        assert derive_seeds(0, 5) == derive_seeds(0, 5)
        assert len(set(derive_seeds(0, 5))) == 5
        assert derive_seeds(0, 3) != derive_seeds(1, 3)

    def test_repeat_is_deterministic(self):
        cfg = _make_config(duration=15.0)
        a = run_batch(cfg, n_runs=2)
        b = run_batch(cfg, n_runs=2)
        pd.testing.assert_frame_equal(a.accuracy_frame(), b.accuracy_frame())

    def test_single_run_batch_equals_run_single(self):
        cfg = _make_config(duration=15.0)
        batch = run_batch(cfg, n_runs=1)
        single = run_single(cfg, derive_seeds(cfg.experiment.master_seed, 1)[0])
        for m in batch.runs:
            assert m.rmse == single.metrics[m.algorithm].rmse

    def test_parallel_matches_serial(self):
        cfg = _make_config(duration=10.0)
        serial = run_batch(cfg, n_runs=2, workers=1)
        parallel = run_batch(cfg, n_runs=2, workers=2)
        pd.testing.assert_frame_equal(serial.accuracy_frame(), parallel.accuracy_frame())

    def test_progress_callback(self):
        cfg = _make_config(duration=5.0)
        seen = []
        run_batch(cfg, n_runs=2, progress_cb=lambda pct, msg: seen.append(pct))
        assert seen == [50, 100]

    def test_zero_runs(self):
        with pytest.raises(ValueError):
            run_batch(_make_config(), n_runs=0)

    def test_aggregate_columns(self):
        batch = run_batch(_make_config(duration=5.0), n_runs=1)
        agg = batch.aggregate()
        assert list(agg["algorithm"]) == ["tskf", "ekf"]
        assert set(agg.columns) >= {"rmse_m_mean", "rmse_m_std", "diverged_frac", "failed_frac"}

    def test_delay_cells(self):
        cfg = replace(ExperimentConfig(), experiment=replace(ExperimentConfig().experiment, delay_cells=[10.0, 20.0]))
        cells = delay_cells(cfg)
        assert [cell_label(c) for c in cells] == ["10", "20", "dynamic"]
        assert cells[-1].channel.delay_ceiling == pytest.approx(30.0)


# ─── Focused Experiments ────────────────────────────────────────


class TestFocusedExperiments:
    def test_blackout_experiment(self):
        cfg = _make_config(duration=60.0, ceiling=10.0)
        result = run_blackout_experiment(cfg, seed=0, length=20.0)
        assert result.start == pytest.approx(40.0)
        assert np.isfinite(result.gp_terminal_error)
        assert np.isfinite(result.plain_terminal_error)
        assert 0.0 <= result.gp_max_variance <= result.prior_variance

    def test_update_cost_grows_with_delay(self):
        cfg = _make_config(duration=5.0)
        costs = measure_update_cost(cfg, [10, 2000], repeats=3)
        assert [c.delay_steps for c in costs] == [10, 2000]
        assert costs[1].seconds > costs[0].seconds
    def test_gp_halves_blackout_drift(self):
        cfg = _make_config(duration=300.0, ceiling=10.0)
        result = run_blackout_experiment(cfg, seed=0, length=120.0)
        assert result.gp_terminal_error < 0.5 * result.plain_terminal_error
        assert result.gp_max_variance <= result.prior_variance

    def test_update_cost_linear_in_delay(self):
        cfg = _make_config(duration=5.0)
        short, long = measure_update_cost(cfg, [1000, 3000], repeats=5)
        assert long.seconds <= 4.0 * short.seconds + 1e-3


class TestStepCost:
    """Per-step cost across delay ceilings on a 10 Hz survey."""

    @pytest.fixture(scope="class")
    def step_ms(self):
        out = {}
        for ceiling in (10.0, 30.0):
            cfg = ExperimentConfig()
            cfg = replace(cfg, scenario=replace(cfg.scenario, duration=150.0, dt=0.1),
                          sensors=replace(cfg.sensors, imu_rate=10.0),
                          tskf=replace(cfg.tskf, concurrent=False))
            cfg = cfg.with_delay(ceiling, "fixed").validate()
            metrics = run_single(cfg, seed=0, algorithms=["tskf", "fgo"]).metrics
            out[ceiling] = {name: m.step_time_ms_mean for name, m in metrics.items()}
        return out

    def test_fgo_grows_with_window(self, step_ms):
        assert step_ms[30.0]["fgo"] >= 5.0 * step_ms[10.0]["fgo"]

    def test_tskf_nearly_flat(self, step_ms):
        assert step_ms[30.0]["tskf"] <= 2.0 * step_ms[10.0]["tskf"]

    def test_tskf_much_cheaper_than_fgo(self, step_ms):
        assert 10.0 * step_ms[30.0]["tskf"] <= step_ms[30.0]["fgo"]
