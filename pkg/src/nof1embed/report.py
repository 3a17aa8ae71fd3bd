"""Report files: JSON summary, delimited tables and SVG trajectory plots."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .errors import DataError
from .pipeline import Report

INTERVENTION_COLOR = "#4c72b0"
CONTROL_COLOR = "#dd8452"

# stable SVG element ids so reruns give identical files
matplotlib.rcParams["svg.hashsalt"] = "nof1embed"
_SVG_META = {"Date": None, "Creator": "nof1embed"}


def pvalue_rows(report: Report) -> list[list[str]]:
    """Header plus one row per participant, one column per selected test."""
    pids = [p["participant_id"] for p in report.participants]
    rows = [["participant_id", *report.test_menu]]
    for pid in pids:
        row = [pid]
        for name in report.test_menu:
            p = report.p_value(pid, name)
            row.append("" if p is None else repr(float(p)))
        rows.append(row)
    return rows


def format_table(rows: list[list[str]], delimiter: str = ",") -> str:
    buf = io.StringIO()
    csv.writer(buf, delimiter=delimiter, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def score_rows(report: Report) -> list[list[str]]:
    has_ref = any("reference_score" in p for p in report.participants)
    header = ["timestamp", "participant", "intervention", "pc_score"] + (["reference_score"] if has_ref else [])
    rows = [header]
    for p in report.participants:
        for i, ts in enumerate(p["timestamp"]):
            row = [str(ts), p["participant_id"], str(p["intervention"][i]), repr(p["pc_score"][i])]
            if has_ref:
                ref = p.get("reference_score")
                row.append("" if ref is None else repr(ref[i]))
            rows.append(row)
    return rows


def _blocks(participant: dict) -> list[tuple[int, float, float, bool]]:
    """(block index, start, end, intervention) in timestamp units."""
    L = participant["block_length"]
    seen: dict[int, bool] = {}
    for ts, flag in zip(participant["timestamp"], participant["intervention"]):
        seen.setdefault(ts // L, bool(flag))
    return [(k, k * L - 0.5, (k + 1) * L - 0.5, seen[k]) for k in sorted(seen)]


def participant_figure(participant: dict, p_values: dict[str, float] | None = None) -> Figure:
    """PC score against time, one shaded span per design block."""
    fig = Figure(figsize=(7.0, 3.2))
    ax = fig.add_subplot(1, 1, 1)
    for k, start, end, on in _blocks(participant):
        ax.axvspan(start, end, color=INTERVENTION_COLOR if on else CONTROL_COLOR, alpha=0.18, lw=0, gid=f"block-{k}")
    ts, ys = participant["timestamp"], participant["pc_score"]
    ax.plot(ts, ys, color="black", lw=1.0, marker="o", ms=2.5, label="PC1 score")
    ax.set_xlabel("observation index")
    ax.set_ylabel("PC1 score")
    if "reference_score" in participant:
        ax2 = ax.twinx()
        ax2.plot(ts, participant["reference_score"], color="0.45", lw=0.8, ls="--", label="reference (informational)")
        ax2.set_ylabel("reference score (informational)")
    title = f"participant {participant['participant_id']}"
    if p_values:
        title += "  (" + ", ".join(f"{k}: p={v:.3g}" for k, v in p_values.items()) + ")"
    ax.set_title(title, fontsize=9)
    ax.set_xlim(-0.5, max(ts) + 0.5 if ts else 0.5)
    fig.tight_layout()
    return fig


def loss_figure(history: list[dict]) -> Figure:
    fig = Figure(figsize=(4.5, 3.0))
    ax = fig.add_subplot(1, 1, 1)
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train")
    if history and "val_loss" in history[0]:
        ax.plot(epochs, [h["val_loss"] for h in history], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    return fig


def _save_svg(fig: Figure, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)


def emit_report(report: Report, out_dir: Path | str, figures: bool | None = None) -> list[Path]:
    """Write report.json, pvalues.csv, scores.csv, run_info.json and SVG figures."""
    try:
        return _emit(report, Path(out_dir), figures)
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}") from exc


def _emit(report: Report, out: Path, figures: bool | None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text)
        written.append(path)

    put("report.json", report.to_json())
    put("pvalues.csv", format_table(pvalue_rows(report)))
    put("scores.csv", format_table(score_rows(report)))
    put("run_info.json", json.dumps({"wall_time_s": report.wall_time_s}, indent=1) + "\n")
    if figures is None:
        figures = report.config.get("figures", True)
    if figures:
        for p in report.participants:
            pvals = {n: report.p_value(p["participant_id"], n) for n in report.test_menu}
            path = out / f"participant_{p['participant_id']}.svg"
            _save_svg(participant_figure(p, pvals), path)
            written.append(path)
        if report.loss_history:
            path = out / "loss.svg"
            _save_svg(loss_figure(report.loss_history), path)
            written.append(path)
    return written


def load_report(in_dir: Path | str) -> Report:
    path = Path(in_dir) / "report.json"
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no report.json in {in_dir}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    return Report.from_dict(d)
