"""Tests for the command-line interface."""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from extraction_lab.cli import main, parse_args
from extraction_lab.extraction import QueryLog
from extraction_lab.models import MetricsReport, Provenance
from extraction_lab.report import write_json_report, write_query_log


def _exit_code(argv: list[str]) -> int:
    with pytest.raises(SystemExit) as exc_info:
        main(argv)
    return exc_info.value.code


def test_parse_args_defaults():
    """Test optional flags default to None and the log level to INFO."""
    args = parse_args(["attack", "--config", "configs/blobs.yaml"])
    assert args.command == "attack"
    assert args.seed is None and args.delta is None and args.out is None
    assert args.log_level == "INFO"
    with pytest.raises(SystemExit):
        parse_args(["steal"])


def test_attack_command(tiny_config, tmp_path):
    """Test the attack command runs and honours --out and --seed."""
    out = tmp_path / "cli"
    assert _exit_code(["attack", "--config", str(tiny_config), "--out", str(out), "--seed", "5"]) == 0
    saved = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert saved["seed"] == 5
    assert saved["config"]["output_dir"] == str(out)
    assert (out / "logs" / "run.log").exists()


def test_log_follows_config_output_dir(tiny_config):
    """Test without --out the run log lands in the config's output_dir."""
    assert _exit_code(["train-target", "--config", str(tiny_config)]) == 0
    out = tiny_config.parent / "out"
    assert (out / "models" / "target.npz").exists()
    assert "Target saved" in (out / "logs" / "run.log").read_text(encoding="utf-8")


def test_missing_config(tmp_path):
    """Test a missing or omitted config exits with status 1."""
    out = str(tmp_path / "o")
    assert _exit_code(["attack", "--config", str(tmp_path / "nope.yaml"), "--out", out]) == 1
    assert _exit_code(["attack", "--out", out]) == 1


def test_failed_stage_exit_code(tmp_path):
    """Test a failing stage exits with status 2."""
    config = tmp_path / "broken.yaml"
    config.write_text(
        yaml.safe_dump({"dataset": "csv", "dataset_path": str(tmp_path / "missing.csv")}),
        encoding="utf-8",
    )
    assert _exit_code(["train-target", "--config", str(config), "--out", str(tmp_path / "o")]) == 2


def test_report_command(tmp_path):
    """Test report.json is rendered to Markdown alongside it."""
    path = tmp_path / "report.json"
    write_json_report(MetricsReport(name="cli", seed=1, test_agreement=0.5), path)
    assert _exit_code(["report", "--report", str(path), "--out", str(tmp_path)]) == 0
    assert "# Extraction Experiment: cli" in (tmp_path / "report.md").read_text(encoding="utf-8")
    assert _exit_code(["report", "--out", str(tmp_path)]) == 1


def test_detect_command(tmp_path):
    """Test replaying a saved query log writes per-query verdicts."""
    log = QueryLog()
    log.extend(np.zeros((120, 2)), np.zeros(120, dtype=np.int64), 0, Provenance.SEED)
    log_path = tmp_path / "query_log.jsonl"
    write_query_log(log, log_path)

    out = tmp_path / "replay"
    assert _exit_code(["detect", "--log", str(log_path), "--delta", "0.9", "--out", str(out)]) == 0
    verdicts = pd.read_csv(out / "traces" / "replay_verdicts.csv")
    assert len(verdicts) == 120
    assert verdicts["attack"].any()
    assert _exit_code(["detect", "--out", str(out)]) == 1
