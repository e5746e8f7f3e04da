"""Report and trace writers (JSON, JSONL, CSV, Markdown)."""

import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from extraction_lab.extraction import QueryLog, QueryRecord
from extraction_lab.models import EvasionPlan, MetricsReport, Provenance, SearchRecord, Verdict

logger = logging.getLogger(__name__)


def write_json_report(report: MetricsReport, output_path: Path) -> None:
    """
    Write the experiment report as JSON.

    Keys are sorted and no timestamps are included, so equal runs give
    byte-identical files.
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"JSON report written: {output_path}")


def read_json_report(path: Path) -> MetricsReport:
    with open(path, encoding="utf-8") as f:
        return MetricsReport(**json.load(f))


def write_query_log(log: QueryLog, output_path: Path) -> None:
    """One JSON record per query: index, round, provenance, label, sample[, probabilities]."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        for record in log:
            row: dict[str, Any] = {
                "index": record.index,
                "round": record.round,
                "provenance": record.provenance.value,
                "label": record.label,
                "sample": record.sample.tolist(),
            }
            if record.probabilities is not None:
                row["probabilities"] = record.probabilities.tolist()
            f.write(json.dumps(row) + "\n")
    logger.info(f"Query log written: {output_path} ({len(log)} queries)")


def read_query_log(path: Path) -> QueryLog:
    """
    Read a query log written by write_query_log.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If a line is not a valid record or indices are out of order
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Query log not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                probs = row.get("probabilities")
                record = QueryRecord(
                    index=int(row["index"]),
                    round=int(row["round"]),
                    provenance=Provenance(row["provenance"]),
                    label=int(row["label"]),
                    sample=np.asarray(row["sample"], dtype=np.float64),
                    probabilities=None if probs is None else np.asarray(probs, dtype=np.float64),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{line_no}: invalid query record: {e}") from e
            # Indices must run contiguously from 0
            if record.index != len(records):
                raise ValueError(f"{path}:{line_no}: expected index {len(records)}, got {record.index}")
            records.append(record)
    return QueryLog(records)


def verdicts_frame(verdicts: Sequence[Verdict], client: str) -> pd.DataFrame:
    """Per-query verdict table."""
    return pd.DataFrame(
        [
            {
                "index": v.index,
                "client": client,
                "label": v.label,
                "d_min": v.d_min,
                "w": v.current_w,
                "status": v.status.value,
                "attack": v.attack,
            }
            for v in verdicts
        ],
        columns=["index", "client", "label", "d_min", "w", "status", "attack"],
    )


def write_verdicts_csv(frames: Sequence[pd.DataFrame], output_path: Path) -> None:
    frame = pd.concat(frames, ignore_index=True) if frames else verdicts_frame([], "")
    frame.to_csv(output_path, index=False)
    logger.info(f"Verdict trace written: {output_path} ({len(frame)} rows)")


def write_plan_csv(plan: EvasionPlan, output_path: Path) -> None:
    frame = pd.DataFrame(
        [{"kind": e.kind.value, "d_min": e.d_min} for e in plan.entries], columns=["kind", "d_min"]
    )
    # Full precision: a reloaded plan replays to the same decisions
    frame.to_csv(output_path, index=False, float_format="%.17g")
    logger.info(f"Evasion plan written: {output_path} ({plan.dummy_count} dummies)")


def write_sweep_csv(rows: Sequence[dict[str, Any]], output_path: Path) -> None:
    """FPR and detection per delta, ready for plotting."""
    frame = pd.DataFrame(list(rows))
    frame.to_csv(output_path, index=False)
    logger.info(f"Delta sweep written: {output_path} ({len(frame)} thresholds)")


def write_search_trace_csv(trace: Sequence[SearchRecord], output_path: Path) -> None:
    frame = pd.DataFrame(
        [
            {
                "index": r.index,
                "phase": r.phase,
                "learning_rate": r.learning_rate,
                "epochs": r.epochs,
                "fold_accuracies": ";".join(f"{a:.6f}" for a in r.fold_accuracies),
                "mean_accuracy": r.mean_accuracy,
                "failed": r.failed,
            }
            for r in trace
        ]
    )
    frame.to_csv(output_path, index=False)
    logger.info(f"CV-search trace written: {output_path}")


def _fmt(value: float | None, pattern: str = "{:.4f}") -> str:
    return "N/A" if value is None else pattern.format(value)


def generate_markdown_report_string(report: MetricsReport) -> str:
    """
    Generate the experiment summary as Markdown.

    Args:
        report: Experiment metrics

    Returns:
        Markdown formatted string
    """
    # Header
    lines = []
    lines.append(f"# Extraction Experiment: {report.name}")
    lines.append("")

    # Run summary
    lines.append("## Run")
    lines.append("")
    lines.append(f"- **Status:** {report.status}")
    if report.failed_stage:
        lines.append(f"- **Failed stage:** {report.failed_stage}")
        lines.append(f"- **Error:** {report.error}")
    lines.append(f"- **Seed:** {report.seed}")
    lines.append(f"- **Synthesis:** {report.config.get('synthesis', 'N/A')}")
    lines.append(f"- **Hyperparameters:** {report.config.get('hyper_strategy', 'N/A')}")
    lines.append(f"- **Queries:** {report.queries_total}")
    if report.flags:
        lines.append(f"- **Flags:** {', '.join(report.flags)}")
    lines.append("")

    # Extraction metrics
    lines.append("## Extraction")
    lines.append("")
    lines.append("| Metric | Value |")
    lines.append("|--------|-------|")
    lines.append(f"| Target accuracy | {_fmt(report.target_accuracy)} |")
    lines.append(f"| Test-agreement (round 0) | {_fmt(report.round0_test_agreement)} |")
    lines.append(f"| Test-agreement | {_fmt(report.test_agreement)} |")
    lines.append(f"| RU-agreement | {_fmt(report.ru_agreement)} |")
    lines.append(f"| Transferability (targeted) | {_fmt(report.transfer_targeted)} |")
    lines.append(f"| Transferability (non-targeted) | {_fmt(report.transfer_nontargeted)} |")
    lines.append("")

    # Detection and benign FPR
    lines.append("## Detection")
    lines.append("")
    delta = report.config.get("delta")
    lines.append(f"- **Delta:** {delta if delta is not None else 'N/A'}")
    if report.detection_index is None:
        lines.append("- **Detected after:** not detected")
    else:
        lines.append(f"- **Detected after:** {report.detection_index} queries")
    lines.append(f"- **Growing-set memory:** {report.growing_set_bytes} bytes")
    lines.append(f"- **FPR (average):** {_fmt(report.fpr)}")
    if report.fpr_by_mode:
        lines.append("")
        lines.append("| Benign scenario | FPR |")
        lines.append("|-----------------|-----|")
        for mode, rate in sorted(report.fpr_by_mode.items()):
            lines.append(f"| {mode} | {rate:.4f} |")
    lines.append("")

    # Evasion (evade runs only)
    if report.evasion_dummies is not None:
        lines.append("## Evasion")
        lines.append("")
        lines.append(f"- **Dummy queries:** {report.evasion_dummies}")
        lines.append(f"- **Overhead:** {_fmt(report.evasion_overhead, '{:+.0%}')}")
        for control, suppressed in sorted(report.negative_controls_suppressed.items()):
            outcome = "suppressed the alarm" if suppressed else "detected"
            lines.append(f"- **{control}:** {outcome}")
        lines.append("")

    return "\n".join(lines)


def generate_markdown_report(report: MetricsReport, output_path: Path) -> None:
    """Write the Markdown summary next to the JSON report."""
    logger.info(f"Generating Markdown report: {output_path}")
    content = generate_markdown_report_string(report)
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(content)
    logger.info(f"Markdown report written: {output_path}")
