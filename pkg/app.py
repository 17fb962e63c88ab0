"""Delayed cooperative navigation benchmark. Command-line entry point."""

import argparse
import sys
from pathlib import Path

# Ensure project root is in path for imports
sys.path.insert(0, str(Path(__file__).resolve().parent))

import pandas as pd  # noqa: E402

from core.config import ALGORITHMS, ExperimentConfig, parse_config  # noqa: E402
from core.errors import ConfigError, NavigationError  # noqa: E402
from core.harness import delay_cells, derive_seeds, run_delay_grid, run_single  # noqa: E402
from core.oracle import run_oracle_suite  # noqa: E402
from core.report import create_workbook, format_table, write_batch_outputs, write_trace_outputs  # noqa: E402
from utils.logger import get_logger, set_level  # noqa: E402

log = get_logger("cli")

DEFAULT_CONFIG = Path(__file__).resolve().parent / "config.toml"


# ─── Argument Parsing ───────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="experiment TOML (default: shipped config.toml)")
    common.add_argument("--runs", type=int, default=None, help="Monte Carlo runs per delay cell")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--delay-ceiling", type=float, default=None, help="run a single fixed-delay cell at this ceiling (s)")
    common.add_argument("--algorithms", default=None, help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    common.add_argument("--output-dir", type=Path, default=None, help="where CSVs are written")
    common.add_argument("--full-scale", action="store_true", help="500 runs per cell")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--workers", type=int, default=None, help="parallel run workers")
    common.add_argument("--xlsx", action="store_true", help="also write results.xlsx")

    parser = argparse.ArgumentParser(prog="app.py", description="Delay-tolerant cooperative navigation benchmark")
    sub = parser.add_subparsers(dest="command", metavar="{run,validate,oracle,trace}")
    sub.required = True
    sub.add_parser("run", parents=[common], help="execute the delay grid and write results")
    sub.add_parser("validate", parents=[common], help="check the configuration only")
    sub.add_parser("oracle", parents=[common], help="run the linear re-filtering oracle suite")
    sub.add_parser("trace", parents=[common], help="one seeded run with full trace export")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    path = args.config
    if path is None and DEFAULT_CONFIG.exists():
        path = DEFAULT_CONFIG
    overrides = {
        "runs": args.runs,
        "seed": args.seed,
        "delay_ceiling": args.delay_ceiling,
        "algorithms": args.algorithms,
        "output_dir": args.output_dir,
        "full_scale": args.full_scale,
        "log_level": args.log_level,
        "workers": args.workers,
    }
    cfg = parse_config(path, overrides)
    set_level(cfg.logging.level)
    return cfg


# ─── Subcommands ────────────────────────────────────────────────


def _progress(pct: int, msg: str) -> None:
    log.info(f"[{pct:3d}%] {msg}")


def cmd_validate(cfg: ExperimentConfig) -> int:
    cells = ", ".join(c.channel.delay_mode if c.channel.delay_mode == "dynamic" else f"{c.channel.delay_ceiling:g}s"
                      for c in delay_cells(cfg))
    print(f"Config OK: {len(cfg.experiment.algorithms)} algorithm(s), {cfg.experiment.runs} run(s), cells [{cells}]")
    return 0


def cmd_run(cfg: ExperimentConfig, xlsx: bool) -> int:
    out = Path(cfg.experiment.output_dir)
    batches = run_delay_grid(cfg, progress_cb=_progress)
    runs = pd.concat([b.frame() for b in batches], ignore_index=True)
    aggregate = pd.concat([b.aggregate() for b in batches], ignore_index=True)

    paths = write_batch_outputs(out, aggregate, runs)
    if xlsx:
        path = out / "results.xlsx"
        path.write_bytes(create_workbook(aggregate, runs).getvalue())
        paths.append(path)
    print(format_table(aggregate))
    log.info(f"Wrote {len(paths)} file(s) to {out}")
    return 0


def cmd_oracle() -> int:
    checks = run_oracle_suite()
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL'}  rel_err={c.error:.2e}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} oracle checks passed")
    return 0 if failed == 0 else 1


def cmd_trace(cfg: ExperimentConfig) -> int:
    cell = delay_cells(cfg)[0] if cfg.experiment.delay_cells else cfg
    seed = derive_seeds(cfg.experiment.master_seed, 1)[0]
    result = run_single(cell, seed, keep_trace=True)
    out = Path(cfg.experiment.output_dir) / "trace"
    paths = write_trace_outputs(out, result)
    for name, m in result.metrics.items():
        status = "FAIL" if m.failed else f"{m.rmse:.3f} m"
        print(f"{name:8s} {status}")
    log.info(f"Wrote {len(paths)} trace file(s) to {out}")
    return 0


# ─── Main ───────────────────────────────────────────────────────


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = load_config(args)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "oracle":
            return cmd_oracle()
        if args.command == "trace":
            return cmd_trace(cfg)
        return cmd_run(cfg, args.xlsx)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NavigationError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
