"""
End-to-end experiment: data, target, extraction attack, detector replay,
benign clients, metrics and (optionally) evasion planning.

Every stage draws randomness from its own generator derived from the master
seed, so equal configs give byte-identical reports.
"""

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from extraction_lab import metrics
from extraction_lab.datasets import (
    DataSplits,
    SampleGenerator,
    benign_stream,
    blob_generator,
    gen_blobs_dataset,
    load_csv_dataset,
    load_digits_dataset,
    select_seeds,
    split_dataset,
)
from extraction_lab.detector import first_alarm, replay_client, replay_w_stream, threshold_verdicts
from extraction_lab.evasion import (
    NEGATIVE_CONTROLS,
    negative_control_plan,
    plan_dummy_distances,
    suppresses_alarm,
)
from extraction_lab.exceptions import EvasionInfeasibleError, StageError
from extraction_lab.extraction import ExtractionResult, run_extraction
from extraction_lab.models import (
    BenignStreamSpec,
    CraftSpec,
    ExperimentConfig,
    MetricsReport,
    StreamMode,
    Verdict,
)
from extraction_lab.neuralnet import Dataset, Network, accuracy, build_preset, save_network, train
from extraction_lab.oracle import Oracle
from extraction_lab.report import (
    generate_markdown_report,
    verdicts_frame,
    write_json_report,
    write_plan_csv,
    write_query_log,
    write_search_trace_csv,
    write_sweep_csv,
    write_verdicts_csv,
)
from extraction_lab.utils import ensure_output_dirs, stage_rng, stage_seed

logger = logging.getLogger(__name__)

FLAG_EVASION_INFEASIBLE = "evasion_infeasible"


@dataclass
class BenignTrace:
    """W-stream verdicts of one simulated benign client."""

    mode: StreamMode
    client: str
    verdicts: list[Verdict]


@dataclass
class ExperimentState:
    """Artifacts accumulated across stages."""

    cfg: ExperimentConfig
    out: Path
    report: MetricsReport
    stage: str = "init"
    data: Dataset | None = None
    splits: DataSplits | None = None
    target: Network | None = None
    seeds: Dataset | None = None
    attack: ExtractionResult | None = None
    attack_verdicts: list[Verdict] = field(default_factory=list)
    benign: list[BenignTrace] = field(default_factory=list)


@contextmanager
def _stage(state: ExperimentState, name: str) -> Iterator[None]:
    state.stage = name
    logger.info(f"Stage: {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "blobs":
        return gen_blobs_dataset(
            classes=cfg.blobs_classes,
            dim=cfg.blobs_dim,
            per_class=cfg.blobs_per_class,
            margin=cfg.blobs_margin,
            rng=stage_rng(cfg.seed, "data"),
        )
    if cfg.dataset == "digits":
        return load_digits_dataset()
    return load_csv_dataset(Path(cfg.dataset_path or ""))


def benign_source(cfg: ExperimentConfig, data: Dataset) -> Dataset | SampleGenerator:
    """Natural samples for benign clients: fresh blob draws, else the whole corpus."""
    if cfg.dataset == "blobs":
        return blob_generator(cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_margin)
    return data


def train_target(cfg: ExperimentConfig, splits: DataSplits, class_count: int) -> Network:
    """Train the confidential target model on its partition."""
    net = build_preset(
        cfg.target_architecture,
        splits.target_train.input_dim,
        class_count,
        cfg.hidden_width,
        seed=stage_seed(cfg.seed, "target_init"),
    )
    training = cfg.target_training().model_copy(update={"seed": stage_seed(cfg.seed, "target_train")})
    return train(net, splits.target_train, training)


def _prepare_target(state: ExperimentState) -> None:
    cfg = state.cfg
    with _stage(state, "data"):
        state.data = load_dataset(cfg)
        state.splits = split_dataset(
            state.data, cfg.test_fraction, cfg.attacker_fraction, stage_seed(cfg.seed, "split")
        )
        logger.info(
            f"Data: {len(state.data)} samples, {state.data.input_dim} features; "
            f"target={len(state.splits.target_train)}, attacker={len(state.splits.attacker_pool)}, "
            f"test={len(state.splits.test)}"
        )

    with _stage(state, "train_target"):
        # Labels are dense from 0
        class_count = int(state.data.labels.max()) + 1
        state.target = train_target(cfg, state.splits, class_count)
        save_network(state.target, state.out / "models" / "target.npz")
        state.report.target_accuracy = accuracy(state.target, state.splits.test)
        logger.info(f"Target accuracy on test split: {state.report.target_accuracy:.4f}")


def _prepare(state: ExperimentState) -> None:
    cfg = state.cfg
    _prepare_target(state)
    with _stage(state, "attack"):
        state.seeds = select_seeds(
            state.splits.attacker_pool, cfg.seeds_per_class, stage_rng(cfg.seed, "seeds")
        )
        # The attack runs against an undefended API; detection is scored by replay
        oracle = Oracle(state.target, cfg.response_mode)
        attack_cfg = cfg.attack_config().model_copy(update={"seed": stage_seed(cfg.seed, "attack")})
        state.attack = run_extraction(oracle, state.seeds, attack_cfg, target_cfg=cfg.target_training())
        state.report.queries_total = oracle.query_count
        state.report.flags.extend(state.attack.flags)
        state.report.training_config = state.attack.training_config.model_dump(mode="json")
        save_network(state.attack.substitute, state.out / "models" / "substitute.npz")
        write_query_log(state.attack.log, state.out / "traces" / "query_log.jsonl")
        if state.attack.search_trace:
            write_search_trace_csv(state.attack.search_trace, state.out / "traces" / "search_trace.csv")


def _detect(state: ExperimentState) -> None:
    cfg = state.cfg
    with _stage(state, "detect"):
        samples = state.attack.log.samples()
        # Classes come from the target, not from whatever the attacker logged
        labels = state.target.predict(samples)
        verdicts, client = replay_client(samples, labels, cfg.detector_config())
        state.attack_verdicts = verdicts
        state.report.detection_index = first_alarm(verdicts)
        state.report.growing_set_bytes = client.growing_set_bytes
        if state.report.detection_index is None:
            logger.info(f"Attack not detected at delta={cfg.delta}")
        else:
            logger.info(f"Attack detected after {state.report.detection_index} queries")


def _simulate_benign(state: ExperimentState) -> None:
    cfg = state.cfg
    source = benign_source(cfg, state.data)
    det_cfg = cfg.detector_config()
    with _stage(state, "benign"):
        for mode in cfg.benign_modes:
            for c in range(cfg.benign_clients):
                spec = BenignStreamSpec(
                    mode=mode,
                    length=cfg.benign_length,
                    sequence_length=cfg.sequence_length,
                    input_dim=source.input_dim,
                    noise_scale=cfg.sequence_noise,
                    noise_floor=cfg.sequence_noise_floor,
                    seed=stage_seed(cfg.seed, f"benign/{mode.value}/{c}"),
                )
                stream = benign_stream(spec, source)
                # Unfrozen W stream: FPR at any delta comes from one replay
                verdicts = replay_w_stream(stream, state.target.predict(stream), det_cfg)
                state.benign.append(BenignTrace(mode, f"benign-{mode.value}-{c}", verdicts))
            logger.info(f"Simulated {cfg.benign_clients} benign clients ({mode.value})")


def benign_fpr(traces: list[BenignTrace], delta: float) -> dict[str, float]:
    """Mean FPR per scenario at a threshold."""
    per_mode: dict[str, list[float]] = {}
    for trace in traces:
        rate = metrics.fpr(threshold_verdicts(trace.verdicts, delta))
        per_mode.setdefault(trace.mode.value, []).append(rate)
    return {mode: float(np.mean(rates)) for mode, rates in per_mode.items()}


def _compute_metrics(state: ExperimentState) -> None:
    cfg = state.cfg
    report = state.report
    with _stage(state, "metrics"):
        if cfg.compute_agreement:
            report.test_agreement = metrics.test_agreement(
                state.target, state.attack.substitute, state.splits.test
            )
            report.round0_test_agreement = metrics.test_agreement(
                state.target, state.attack.round_substitutes[0], state.splits.test
            )
            report.ru_agreement = metrics.ru_agreement(
                state.target, state.attack.substitute, cfg.ru_samples, stage_rng(cfg.seed, "ru")
            )
            logger.info(
                f"Test-agreement {report.round0_test_agreement:.4f} (round 0) -> "
                f"{report.test_agreement:.4f}; RU-agreement {report.ru_agreement:.4f}"
            )
        if cfg.compute_transferability:
            spec = CraftSpec(method=cfg.transfer_method, epsilon=cfg.transfer_epsilon)
            report.transfer_targeted, report.transfer_nontargeted = metrics.transferability(
                state.target, state.attack.substitute, state.seeds, spec
            )
            logger.info(
                f"Transferability: targeted {report.transfer_targeted:.4f}, "
                f"non-targeted {report.transfer_nontargeted:.4f}"
            )
        if cfg.compute_fpr and state.benign:
            report.fpr_by_mode = benign_fpr(state.benign, cfg.delta)
            report.fpr = float(np.mean(list(report.fpr_by_mode.values())))
            logger.info(f"FPR at delta={cfg.delta}: {report.fpr:.4f} {report.fpr_by_mode}")


def _plan_evasion(state: ExperimentState) -> None:
    cfg = state.cfg
    report = state.report
    det_cfg = cfg.detector_config()
    with _stage(state, "evasion"):
        samples = state.attack.log.samples()
        # The adversary plans against the distances its own queries produce
        undefended = replay_w_stream(samples, state.target.predict(samples), det_cfg)
        d_mins = [v.d_min for v in undefended if v.d_min is not None]
        rng = stage_rng(cfg.seed, "evasion")
        try:
            plan = plan_dummy_distances(d_mins, cfg.delta, det_cfg, rng)
        except EvasionInfeasibleError as e:
            logger.warning(f"Evasion planning failed: {e}")
            report.flags.append(FLAG_EVASION_INFEASIBLE)
        else:
            report.evasion_dummies = plan.dummy_count
            report.evasion_overhead = plan.overhead_ratio
            write_plan_csv(plan, state.out / "traces" / "evasion_plan.csv")

        # Naive strategies are scored even when planning failed
        for control in NEGATIVE_CONTROLS:
            naive = negative_control_plan(d_mins, control, cfg.delta, det_cfg, rng)
            report.negative_controls_suppressed[control] = suppresses_alarm(naive, cfg.delta, det_cfg)
        logger.info(f"Negative controls suppressing the alarm: {report.negative_controls_suppressed}")


def _write_traces(state: ExperimentState) -> None:
    frames = [verdicts_frame(state.attack_verdicts, "attacker")]
    frames.extend(verdicts_frame(t.verdicts, t.client) for t in state.benign)
    write_verdicts_csv(frames, state.out / "traces" / "verdicts.csv")


def _finish(state: ExperimentState) -> None:
    write_json_report(state.report, state.out / "report.json")
    generate_markdown_report(state.report, state.out / "report.md")


def prepare_target(cfg: ExperimentConfig, output_dir: Path | None = None) -> MetricsReport:
    """Run only the data and target stages; writes models/target.npz and the report."""
    out = Path(output_dir or cfg.output_dir)
    ensure_output_dirs(out)
    report = MetricsReport(name=cfg.name, seed=cfg.seed, config=cfg.model_dump(mode="json"))
    state = ExperimentState(cfg=cfg, out=out, report=report)
    try:
        _prepare_target(state)
    except StageError as e:
        report.status = "failed"
        report.failed_stage = e.stage
        report.error = str(e.cause)
        _finish(state)
        raise
    _finish(state)
    return report


def run_experiment(cfg: ExperimentConfig, output_dir: Path | None = None) -> MetricsReport:
    """
    Run every enabled stage and write the report.

    Args:
        cfg: Validated experiment config
        output_dir: Overrides cfg.output_dir

    Returns:
        MetricsReport (also written to report.json and report.md)

    Raises:
        StageError: On the first failing stage; a report with status "failed",
            the stage tag and everything computed so far is written first
    """
    out = Path(output_dir or cfg.output_dir)
    ensure_output_dirs(out)
    report = MetricsReport(name=cfg.name, seed=cfg.seed, config=cfg.model_dump(mode="json"))
    state = ExperimentState(cfg=cfg, out=out, report=report)

    logger.info("=" * 80)
    logger.info(f"Experiment '{cfg.name}' (seed {cfg.seed}) starting")
    logger.info("=" * 80)

    # Each stage raises StageError with its tag; the partial report is written below
    try:
        _prepare(state)
        if cfg.compute_detection or cfg.compute_evasion:
            _detect(state)
        if cfg.compute_fpr:
            _simulate_benign(state)
        _compute_metrics(state)
        if cfg.compute_evasion:
            _plan_evasion(state)
        _write_traces(state)
    except StageError as e:
        logger.error(f"Experiment failed: {e}", exc_info=True)
        report.status = "failed"
        report.failed_stage = e.stage
        report.error = str(e.cause)
        _finish(state)
        raise

    report.flags = sorted(set(report.flags))
    _finish(state)
    logger.info("=" * 80)
    logger.info(f"Experiment '{cfg.name}' complete: {out / 'report.json'}")
    logger.info("=" * 80)
    return report


def sweep_delta(
    cfg: ExperimentConfig, output_dir: Path | None = None
) -> list[dict[str, float | int | None]]:
    """
    FPR and detection index for every threshold in cfg.sweep_deltas.

    Growing sets are never frozen in the sweep, so all thresholds share one W
    stream per client and FPR is monotone in delta. Rows are written to
    traces/delta_sweep.csv.
    """
    out = Path(output_dir or cfg.output_dir)
    ensure_output_dirs(out)
    report = MetricsReport(name=cfg.name, seed=cfg.seed, config=cfg.model_dump(mode="json"))
    state = ExperimentState(cfg=cfg, out=out, report=report)

    _prepare(state)
    _simulate_benign(state)
    with _stage(state, "sweep"):
        samples = state.attack.log.samples()
        attack_stream = replay_w_stream(samples, state.target.predict(samples), cfg.detector_config())

        rows: list[dict[str, float | int | None]] = []
        for delta in sorted(cfg.sweep_deltas):
            flags = threshold_verdicts(attack_stream, delta)
            detected = next((i + 1 for i, flag in enumerate(flags) if flag), None)
            # Benign traces are shared across thresholds
            per_mode = benign_fpr(state.benign, delta)
            row: dict[str, float | int | None] = {
                "delta": delta,
                "detection_index": detected,
                "fpr": float(np.mean(list(per_mode.values()))) if per_mode else None,
            }
            row.update({f"fpr_{mode}": rate for mode, rate in sorted(per_mode.items())})
            rows.append(row)
            logger.info(f"delta={delta:.2f}: detected at {detected}, FPR {row['fpr']}")

        write_sweep_csv(rows, out / "traces" / "delta_sweep.csv")
    return rows
