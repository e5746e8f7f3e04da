"""Command-line interface for the extraction lab."""

import argparse
import logging
import sys
from pathlib import Path

from extraction_lab.detector import first_alarm, replay_client
from extraction_lab.exceptions import StageError
from extraction_lab.experiment import prepare_target, run_experiment, sweep_delta
from extraction_lab.logging_config import setup_logging
from extraction_lab.models import DetectorConfig, ExperimentConfig
from extraction_lab.neuralnet import load_network
from extraction_lab.report import (
    generate_markdown_report,
    read_json_report,
    read_query_log,
    verdicts_frame,
    write_verdicts_csv,
)
from extraction_lab.utils import ensure_output_dirs, load_config

logger = logging.getLogger(__name__)

COMMANDS = ["train-target", "attack", "detect", "evade", "sweep-delta", "report"]


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        description="Model extraction attacks and PRADA detection on small targets",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )

    parser.add_argument("command", choices=COMMANDS, help="Command to execute")

    parser.add_argument(
        "--config",
        type=Path,
        help="Flat YAML experiment config (required except for 'report' and 'detect')",
    )
    parser.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    parser.add_argument(
        "--out",
        type=Path,
        help="Output directory for models, traces, reports and logs (overrides the config)",
    )
    parser.add_argument("--delta", type=float, help="Detection threshold (overrides the config)")
    parser.add_argument("--log", type=Path, help="Query log (JSONL) replayed by 'detect'")
    parser.add_argument(
        "--target",
        type=Path,
        help="Target model (.npz); 'detect' relabels queries with it instead of the logged labels",
    )
    parser.add_argument("--report", type=Path, help="report.json rendered by 'report'")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO",
        help="Console logging level",
    )

    return parser.parse_args(argv)


def _config(args: argparse.Namespace, **extra: object) -> ExperimentConfig:
    if args.config is None:
        raise ValueError(f"'{args.command}' requires --config")
    overrides: dict[str, object] = {"seed": args.seed, "delta": args.delta, **extra}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    return load_config(args.config, overrides)


def run_train_target(args: argparse.Namespace) -> int:
    cfg = _config(args)
    report = prepare_target(cfg)
    logger.info(f"Target saved to {Path(cfg.output_dir) / 'models' / 'target.npz'}")
    logger.info(f"Test accuracy: {report.target_accuracy:.4f}")
    return 0


def run_attack(args: argparse.Namespace, evade: bool = False) -> int:
    cfg = _config(args, compute_evasion=True) if evade else _config(args)
    report = run_experiment(cfg)

    logger.info("=" * 80)
    logger.info("RESULTS")
    logger.info(f"  Queries: {report.queries_total}")
    logger.info(f"  Test-agreement: {report.test_agreement}")
    logger.info(f"  Detection index: {report.detection_index}")
    logger.info(f"  FPR: {report.fpr}")
    if evade:
        logger.info(f"  Evasion dummies: {report.evasion_dummies} (overhead {report.evasion_overhead})")
    if report.flags:
        logger.info(f"  Flags: {', '.join(report.flags)}")
    logger.info("=" * 80)
    return 0


def run_evade(args: argparse.Namespace) -> int:
    return run_attack(args, evade=True)


def run_detect(args: argparse.Namespace) -> int:
    if args.log is None:
        raise ValueError("'detect' requires --log")
    # Detector settings: the config when given, else defaults plus --delta
    if args.config is not None:
        cfg = _config(args)
        det_cfg = cfg.detector_config()
        out = Path(cfg.output_dir)
    else:
        det_cfg = DetectorConfig() if args.delta is None else DetectorConfig(delta=args.delta)
        out = args.out or Path("outputs")
    ensure_output_dirs(out)

    log = read_query_log(args.log)
    samples = log.samples()
    # Relabel with the target when available; logged labels otherwise
    labels = load_network(args.target).predict(samples) if args.target else log.labels()
    verdicts, state = replay_client(samples, labels, det_cfg)

    write_verdicts_csv([verdicts_frame(verdicts, "replay")], out / "traces" / "replay_verdicts.csv")
    detected = first_alarm(verdicts)
    if detected is None:
        logger.info(f"No extraction detected in {len(log)} queries at delta={det_cfg.delta}")
    else:
        logger.info(
            f"Extraction detected after {detected} of {len(log)} queries at delta={det_cfg.delta}"
        )
    logger.info(f"Growing-set memory: {state.growing_set_bytes} bytes")
    return 0


def run_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    rows = sweep_delta(cfg)
    for row in rows:
        logger.info(f"  delta={row['delta']}: detection={row['detection_index']}, fpr={row['fpr']}")
    return 0


def run_report(args: argparse.Namespace) -> int:
    if args.report is None:
        raise ValueError("'report' requires --report")
    report = read_json_report(args.report)
    generate_markdown_report(report, args.report.with_suffix(".md"))
    return 0


HANDLERS = {
    "train-target": run_train_target,
    "attack": run_attack,
    "detect": run_detect,
    "evade": run_evade,
    "sweep-delta": run_sweep,
    "report": run_report,
}


def _log_dir(args: argparse.Namespace) -> Path:
    """Logs live with the run's outputs: --out, else the config's output_dir."""
    if args.out is not None:
        return args.out / "logs"
    if args.config is not None:
        try:
            return Path(load_config(args.config).output_dir) / "logs"
        except (FileNotFoundError, ValueError):
            pass  # reported by the command handler once logging is up
    return Path("outputs") / "logs"


def main(argv: list[str] | None = None) -> None:
    """Main CLI entry point."""
    args = parse_args(argv)
    setup_logging(_log_dir(args), log_level=args.log_level)

    try:
        exit_code = HANDLERS[args.command](args)
    except StageError as e:
        logger.error(f"{args.command} failed at stage={e.stage}: {e.cause}")
        exit_code = 2
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        exit_code = 1
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        exit_code = 1

    sys.exit(exit_code)


if __name__ == "__main__":
    main()
