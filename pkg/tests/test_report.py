"""Unit tests for report and trace writers."""

import json

import numpy as np
import pandas as pd
import pytest

from extraction_lab.extraction import QueryLog
from extraction_lab.models import (
    EvasionPlan,
    MetricsReport,
    PlanEntry,
    Provenance,
    QueryKind,
    Verdict,
    VerdictStatus,
)
from extraction_lab.report import (
    generate_markdown_report,
    generate_markdown_report_string,
    read_json_report,
    read_query_log,
    verdicts_frame,
    write_json_report,
    write_plan_csv,
    write_query_log,
    write_verdicts_csv,
)


@pytest.fixture
def sample_report() -> MetricsReport:
    return MetricsReport(
        name="unit",
        seed=7,
        test_agreement=0.91,
        ru_agreement=0.82,
        transfer_targeted=0.3,
        transfer_nontargeted=0.6,
        fpr=0.0,
        fpr_by_mode={"iid_natural": 0.0, "sequences": 0.02},
        detection_index=245,
        queries_total=400,
        evasion_dummies=120,
        evasion_overhead=0.3,
        negative_controls_suppressed={"noise_far": False},
        flags=["budget_truncated"],
        config={"synthesis": "jbda", "hyper_strategy": "papernot_rule", "delta": 0.9},
    )


def test_json_report_round_trip(tmp_path, sample_report):
    """Test the JSON report reloads into an equal model with sorted keys."""
    path = tmp_path / "report.json"
    write_json_report(sample_report, path)
    assert read_json_report(path) == sample_report
    keys = list(json.loads(path.read_text(encoding="utf-8")).keys())
    assert keys == sorted(keys)


def test_json_report_is_byte_stable(tmp_path, sample_report):
    """Test equal reports give identical files."""
    write_json_report(sample_report, tmp_path / "a.json")
    write_json_report(sample_report.model_copy(), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_query_log_round_trip(tmp_path):
    """Test samples, labels and probabilities survive the JSONL log."""
    log = QueryLog()
    log.extend(np.array([[0.1, -0.2], [0.3, 0.4]]), np.array([1, 0]), 0, Provenance.SEED)
    probs = np.array([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
    log.extend(np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 0.5]]), probs, 1, Provenance.SYNTHETIC)

    path = tmp_path / "traces" / "query_log.jsonl"
    write_query_log(log, path)
    loaded = read_query_log(path)
    assert len(loaded) == 5
    assert [r.index for r in loaded] == list(range(5))
    assert loaded.labels().tolist() == [1, 0, 1, 0, 0]
    assert np.array_equal(loaded.samples(), log.samples())
    assert loaded.records[0].probabilities is None
    assert np.array_equal(loaded.records[2].probabilities, probs[0])
    assert loaded.records[3].provenance == Provenance.SYNTHETIC


def test_query_log_rejects_bad_files(tmp_path):
    """Test out-of-order indices, malformed lines and missing files."""
    path = tmp_path / "log.jsonl"
    rows = [
        {"index": 0, "round": 0, "provenance": "seed", "label": 0, "sample": [0.0]},
        {"index": 2, "round": 0, "provenance": "seed", "label": 0, "sample": [0.1]},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_query_log(path)

    path.write_text('{"index": 0}\n', encoding="utf-8")
    with pytest.raises(ValueError):
        read_query_log(path)

    with pytest.raises(FileNotFoundError):
        read_query_log(tmp_path / "missing.jsonl")


def test_verdicts_csv(tmp_path):
    """Test the verdict trace has one row per query and stable columns."""
    verdicts = [
        Verdict(index=0, label=1, status=VerdictStatus.WARMING_UP),
        Verdict(index=1, label=1, status=VerdictStatus.ATTACK, current_w=0.4, d_min=0.2, attack=True),
    ]
    frame = verdicts_frame(verdicts, "attacker")
    assert list(frame.columns) == ["index", "client", "label", "d_min", "w", "status", "attack"]

    path = tmp_path / "verdicts.csv"
    write_verdicts_csv([frame, verdicts_frame(verdicts[:1], "benign-0")], path)
    loaded = pd.read_csv(path)
    assert len(loaded) == 3
    assert loaded["client"].tolist() == ["attacker", "attacker", "benign-0"]
    assert loaded["status"].tolist() == ["warming_up", "attack", "warming_up"]


def test_plan_csv(tmp_path):
    """Test the evasion plan keeps entry order and kinds."""
    plan = EvasionPlan(
        entries=[
            PlanEntry(d_min=0.5, kind=QueryKind.USEFUL),
            PlanEntry(d_min=0.9, kind=QueryKind.DUMMY),
            PlanEntry(d_min=0.4, kind=QueryKind.USEFUL),
        ],
        useful_count=2,
        dummy_count=1,
    )
    path = tmp_path / "plan.csv"
    write_plan_csv(plan, path)
    loaded = pd.read_csv(path)
    assert loaded["kind"].tolist() == ["useful", "dummy", "useful"]
    assert loaded["d_min"].tolist() == [0.5, 0.9, 0.4]


def test_markdown_report_contents(sample_report):
    """Test headline metrics and sections appear in the summary."""
    content = generate_markdown_report_string(sample_report)
    assert "# Extraction Experiment: unit" in content
    assert "| Test-agreement | 0.9100 |" in content
    assert "| Target accuracy | N/A |" in content
    assert "**Detected after:** 245 queries" in content
    assert "| sequences | 0.0200 |" in content
    assert "## Evasion" in content
    assert "**noise_far:** detected" in content
    assert "budget_truncated" in content


def test_markdown_report_failed_run(tmp_path):
    """Test a failed run names its stage and omits evasion."""
    report = MetricsReport(name="broken", seed=0, status="failed", failed_stage="data", error="boom")
    path = tmp_path / "report.md"
    generate_markdown_report(report, path)
    content = path.read_text(encoding="utf-8")
    assert "**Failed stage:** data" in content
    assert "not detected" in content
    assert "## Evasion" not in content
