"""Result emission: versioned CSVs, the aligned summary table and a styled workbook."""

from io import BytesIO
from pathlib import Path

import numpy as np
import openpyxl
import pandas as pd
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

from core.harness import ALGORITHM_LABELS, RunResult
from utils.logger import get_logger

log = get_logger("report")

SCHEMA_VERSION = "v1"
RESULTS_COLUMNS = ["algorithm", "delay_s", "rmse_m_mean", "rmse_m_std", "diverged_frac", "failed_frac"]
RESULTS_TIMING_COLUMNS = ["algorithm", "delay_s", "step_time_ms_mean", "step_time_ms_p99"]
TIMING_COLUMNS = ["cell", "run", "algorithm", "step_time_ms_mean", "step_time_ms_p99"]
FLOAT_FORMAT = "%.6g"


# ─── CSV ────────────────────────────────────────────────────────


def write_csv(df: pd.DataFrame, path: Path, schema: str) -> Path:
    """CSV whose first line names the schema: `# schema: <name>/v1`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema: {schema}/{SCHEMA_VERSION}\n")
        df.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    log.debug(f"Wrote {path} ({len(df)} rows)")
    return path


def read_csv(path: Path) -> tuple[str, pd.DataFrame]:
    """Inverse of write_csv; returns (schema, frame)."""
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# schema:"):
            raise ValueError(f"{path}: missing schema header")
        return header.split(":", 1)[1].strip(), pd.read_csv(fh)


def results_frame(aggregate: pd.DataFrame) -> pd.DataFrame:
    """Accuracy summary; byte-identical across repeated runs with the same seed."""
    return aggregate[RESULTS_COLUMNS].reset_index(drop=True)


def results_timing_frame(aggregate: pd.DataFrame) -> pd.DataFrame:
    return aggregate[RESULTS_TIMING_COLUMNS].reset_index(drop=True)


def runs_frame(runs: pd.DataFrame) -> pd.DataFrame:
    """Per-run accuracy rows; wall-clock timing lives in the timing CSV."""
    return runs.drop(columns=[c for c in ("step_time_ms_mean", "step_time_ms_p99") if c in runs.columns])


def write_batch_outputs(output_dir: Path, aggregate: pd.DataFrame, runs: pd.DataFrame) -> list[Path]:
    out = Path(output_dir)
    return [
        write_csv(results_frame(aggregate), out / "results.csv", "results"),
        write_csv(runs_frame(runs), out / "runs.csv", "runs"),
        write_csv(results_timing_frame(aggregate), out / "results_timing.csv", "results_timing"),
        write_csv(runs[TIMING_COLUMNS], out / "timing.csv", "timing"),
    ]


def trace_frame(result: RunResult) -> pd.DataFrame:
    """Long-format truth/estimate/error rows for every traced algorithm."""
    frames = []
    truth = result.truth.positions
    for name, trace in result.traces.items():
        t = truth[trace.steps]
        frames.append(pd.DataFrame({
            "algorithm": name,
            "step": trace.steps,
            "time_s": trace.steps * result.truth.dt,
            "true_n": t[:, 0], "true_e": t[:, 1], "true_d": t[:, 2],
            "est_n": trace.positions[:, 0], "est_e": trace.positions[:, 1], "est_d": trace.positions[:, 2],
            "error_m": trace.errors,
        }))
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def write_trace_outputs(output_dir: Path, result: RunResult) -> list[Path]:
    out = Path(output_dir)
    paths = [
        write_csv(trace_frame(result), out / "trace.csv", "trace"),
        write_csv(pd.DataFrame([r.to_dict() for r in result.channel_trace]), out / "channel.csv", "channel"),
    ]
    events = [dict(e, algorithm=name) for name, tr in result.traces.items() for e in tr.events]
    paths.append(write_csv(pd.DataFrame(events), out / "events.csv", "events"))
    gp_rows = [r.to_dict() for tr in result.traces.values() for r in tr.gp_trace]
    if gp_rows:
        paths.append(write_csv(pd.DataFrame(gp_rows), out / "gp.csv", "gp"))
    return paths


# ─── Text Table ─────────────────────────────────────────────────


def _rmse_cell(row) -> str:
    if row["failed_frac"] >= 1.0:
        return "OOM / Fail"
    if row["diverged_frac"] >= 0.5:
        return f">{row['rmse_m_mean']:.1f} (Div.)" if np.isfinite(row["rmse_m_mean"]) else "Div."
    return f"{row['rmse_m_mean']:.2f}"


def format_table(aggregate: pd.DataFrame) -> str:
    """Algorithm x delay summary as aligned columns."""
    headers = ["Algorithm", "Delay (s)", "Pos. RMSE (m)", "Std (m)", "Time/step (ms)", "p99 (ms)", "Div.", "Fail"]
    rows = []
    for _, r in aggregate.iterrows():
        failed = r["failed_frac"] >= 1.0
        rows.append([
            ALGORITHM_LABELS.get(r["algorithm"], r["algorithm"]),
            str(r["delay_s"]),
            _rmse_cell(r),
            "-" if failed else f"{r['rmse_m_std']:.2f}",
            "-" if failed else f"{r['step_time_ms_mean']:.4f}",
            "-" if failed else f"{r['step_time_ms_p99']:.4f}",
            f"{r['diverged_frac']:.2f}",
            f"{r['failed_frac']:.2f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


# ─── Workbook ───────────────────────────────────────────────────

BLUE = "2563EB"
WHITE = "FFFFFF"
GRAY_BG = "F9FAFB"
GRAY_BORDER = "E5E7EB"
RED_TEXT = "DC2626"
ORANGE_TEXT = "EA580C"
GREEN_TEXT = "059669"

HEADER_FILL = PatternFill("solid", fgColor=BLUE)
HEADER_FONT = Font(name="Inter", bold=True, color=WHITE, size=11)
BODY_FONT = Font(name="Inter", size=10)
BOLD_FONT = Font(name="Inter", size=10, bold=True)
THIN_BORDER = Border(bottom=Side(style="thin", color=GRAY_BORDER))
ALT_ROW_FILL = PatternFill("solid", fgColor=GRAY_BG)

STATUS_STYLES = {
    "fail": {"fill": PatternFill("solid", fgColor="FEF2F2"), "font": Font(name="Inter", size=10, color=RED_TEXT, bold=True)},
    "div": {"fill": PatternFill("solid", fgColor="FFF7ED"), "font": Font(name="Inter", size=10, color=ORANGE_TEXT, bold=True)},
    "ok": {"fill": PatternFill("solid", fgColor="F0FDF4"), "font": Font(name="Inter", size=10, color=GREEN_TEXT, bold=True)},
}


def _set_header_row(ws, headers: list[tuple[str, int]], row: int = 1) -> None:
    for col, (title, width) in enumerate(headers, 1):
        cell = ws.cell(row=row, column=col, value=title)
        cell.fill = HEADER_FILL
        cell.font = HEADER_FONT
        cell.alignment = Alignment(horizontal="center", vertical="center", wrap_text=True)
        ws.column_dimensions[cell.column_letter].width = width
    ws.row_dimensions[row].height = 30


def _finish_row(ws, row: int, max_col: int) -> None:
    for col in range(1, max_col + 1):
        cell = ws.cell(row=row, column=col)
        cell.border = THIN_BORDER
        if row % 2 == 0 and cell.fill.fgColor.rgb == "00000000":
            cell.fill = ALT_ROW_FILL


def _cell_value(value):
    if isinstance(value, (float, np.floating)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _write_results(ws, aggregate: pd.DataFrame) -> None:
    headers = [("Algorithm", 18), ("Delay (s)", 10), ("Status", 12), ("RMSE mean (m)", 14),
               ("RMSE std (m)", 13), ("Time/step (ms)", 15), ("p99 (ms)", 11), ("Diverged", 10), ("Failed", 10)]
    _set_header_row(ws, headers)
    row = 2
    for _, r in aggregate.iterrows():
        status = "fail" if r["failed_frac"] >= 1.0 else "div" if r["diverged_frac"] >= 0.5 else "ok"
        ws.cell(row=row, column=1, value=ALGORITHM_LABELS.get(r["algorithm"], r["algorithm"])).font = BOLD_FONT
        ws.cell(row=row, column=2, value=str(r["delay_s"])).font = BODY_FONT
        st = ws.cell(row=row, column=3, value={"fail": "OOM / FAIL", "div": "DIVERGED", "ok": "OK"}[status])
        st.font = STATUS_STYLES[status]["font"]
        st.fill = STATUS_STYLES[status]["fill"]
        st.alignment = Alignment(horizontal="center")
        for col, key in enumerate(["rmse_m_mean", "rmse_m_std", "step_time_ms_mean", "step_time_ms_p99",
                                   "diverged_frac", "failed_frac"], start=4):
            cell = ws.cell(row=row, column=col, value=_cell_value(r[key]))
            cell.font = BODY_FONT
            cell.number_format = "0.0000" if "time" in key else "0.00"
        _finish_row(ws, row, len(headers))
        row += 1
    ws.auto_filter.ref = f"A1:I{max(row - 1, 1)}"
    ws.freeze_panes = "A2"


def _write_algorithm_sheet(wb, algorithm: str, runs: pd.DataFrame) -> None:
    ws = wb.create_sheet(ALGORITHM_LABELS.get(algorithm, algorithm)[:31])
    columns = ["cell", "run", "seed", "rmse_m", "step_time_ms_mean", "diverged", "failed", "updates", "rejected", "error"]
    _set_header_row(ws, [(c, 16 if c != "error" else 40) for c in columns])
    row = 2
    for _, r in runs.iterrows():
        for col, key in enumerate(columns, start=1):
            ws.cell(row=row, column=col, value=_cell_value(r[key])).font = BODY_FONT
        _finish_row(ws, row, len(columns))
        row += 1
    ws.freeze_panes = "A2"


def create_workbook(aggregate: pd.DataFrame, runs: pd.DataFrame) -> BytesIO:
    """Results sheet plus one run-level sheet per algorithm."""
    log.info("Generating results workbook...")
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = "Results"
    _write_results(ws, aggregate)
    for algorithm, group in runs.groupby("algorithm", sort=False):
        _write_algorithm_sheet(wb, algorithm, group)

    output = BytesIO()
    wb.save(output)
    output.seek(0)
    return output
