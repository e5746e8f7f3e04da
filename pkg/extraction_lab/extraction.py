"""
Model extraction: query a target oracle, grow a labeled set and train a substitute.

Implements the duplication-round loop (seed queries, then synthesize, query and
retrain each round) with JbDA, T-RND (FGSM or I-FGSM), COLOR and the
random-plus-line-search strategy.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from extraction_lab.crafting import craft_batch
from extraction_lab.exceptions import EmptyDatasetError
from extraction_lab.models import (
    AttackConfig,
    CraftMethod,
    CraftMode,
    CraftSpec,
    HyperRange,
    HyperStrategy,
    OptimizerKind,
    Provenance,
    ResponseMode,
    RetrainMode,
    SearchRecord,
    Synthesis,
    TrainingConfig,
)
from extraction_lab.neuralnet import Dataset, Network, build_network, train
from extraction_lab.oracle import Oracle

logger = logging.getLogger(__name__)

LINESEARCH_DEPTH = 10
MIN_TRAMER_BUDGET = 8

FLAG_BUDGET_TRUNCATED = "budget_truncated"
FLAG_DEGENERATE_SINGLE_CLASS = "degenerate_single_class"


@dataclass
class LabeledSet:
    """Queried samples with their oracle responses and provenance, in query order."""

    samples: np.ndarray
    responses: np.ndarray
    provenance: list[Provenance] = field(default_factory=list)

    @classmethod
    def empty(cls, input_dim: int, class_count: int, soft: bool) -> "LabeledSet":
        responses = np.empty((0, class_count)) if soft else np.empty(0, dtype=np.int64)
        return cls(np.empty((0, input_dim)), responses, [])

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return Oracle.labels_of(self.responses)

    def extend(self, samples: np.ndarray, responses: np.ndarray, provenance: Provenance) -> None:
        self.samples = np.concatenate([self.samples, samples])
        self.responses = np.concatenate([self.responses, responses])
        self.provenance.extend([provenance] * len(samples))

    def to_dataset(self) -> Dataset:
        return Dataset(self.samples, self.responses)


@dataclass
class QueryRecord:
    """One answered oracle query."""

    index: int
    round: int
    provenance: Provenance
    label: int
    sample: np.ndarray
    probabilities: np.ndarray | None = None


class QueryLog:
    """Every answered query in oracle order; consumed by detector replay."""

    def __init__(self, records: Sequence[QueryRecord] = ()):
        self.records: list[QueryRecord] = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def extend(
        self, samples: np.ndarray, responses: np.ndarray, round_index: int, provenance: Provenance
    ) -> None:
        labels = Oracle.labels_of(responses)
        soft = np.asarray(responses).ndim == 2
        for i, sample in enumerate(samples):
            self.records.append(
                QueryRecord(
                    index=len(self.records),
                    round=round_index,
                    provenance=provenance,
                    label=int(labels[i]),
                    sample=np.array(sample, dtype=np.float64),
                    probabilities=np.array(responses[i], dtype=np.float64) if soft else None,
                )
            )

    def samples(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, 0))
        return np.stack([r.sample for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def to_frame(self) -> pd.DataFrame:
        """Per-query summary table (sample vectors omitted)."""
        return pd.DataFrame(
            [
                {"index": r.index, "round": r.round, "provenance": r.provenance.value, "label": r.label}
                for r in self.records
            ],
            columns=["index", "round", "provenance", "label"],
        )


@dataclass
class ExtractionResult:
    """Substitute model plus everything recorded while building it."""

    substitute: Network
    log: QueryLog
    training_config: TrainingConfig
    round_substitutes: list[Network] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    segments: list[tuple[int, int, int]] = field(default_factory=list)
    search_trace: list[SearchRecord] = field(default_factory=list)


def run_extraction(
    oracle: Oracle,
    seeds: Dataset,
    cfg: AttackConfig,
    target_cfg: TrainingConfig | None = None,
) -> ExtractionResult:
    """
    Run the duplication-round extraction loop against an oracle.

    Seed queries count against the budget. A round that would exceed the budget
    is truncated, the substitute is still trained on it and the result carries
    the `budget_truncated` flag.

    Args:
        oracle: Fresh prediction API of the target
        seeds: Natural seed samples (their labels are only used for a balance check)
        cfg: Attack strategy and budget
        target_cfg: Target training hyperparameters, required by the `same` strategy

    Returns:
        ExtractionResult with the final substitute, query log and per-round substitutes

    Raises:
        EmptyDatasetError: If no seeds are given
        ValueError: If the seed set alone exceeds the budget
    """
    rng = np.random.default_rng(cfg.seed)
    soft = cfg.response_mode == ResponseMode.PROBABILITIES
    if oracle.response_mode != cfg.response_mode:
        logger.warning(
            f"Oracle answers {oracle.response_mode.value} but the attack expects "
            f"{cfg.response_mode.value}; using the oracle's mode"
        )
        soft = oracle.response_mode == ResponseMode.PROBABILITIES

    if cfg.synthesis == Synthesis.TRAMER:
        return tramer_attack(
            oracle,
            oracle.input_dim,
            cfg.budget,
            rng,
            strategy=cfg.hyper_strategy,
            target_cfg=target_cfg,
            hidden=cfg.substitute_hidden,
            seed=cfg.seed,
        )

    if len(seeds) == 0:
        raise EmptyDatasetError("Extraction needs at least one seed sample")
    if len(seeds) > cfg.budget:
        raise ValueError(f"{len(seeds)} seed queries exceed the budget of {cfg.budget}")
    _check_seed_balance(seeds, cfg.seeds_per_class)

    # Round 0: label the seeds
    labeled = LabeledSet.empty(oracle.input_dim, oracle.class_count, soft)
    log = QueryLog()
    flags: list[str] = []

    responses = oracle.query_batch(seeds.samples)
    labeled.extend(seeds.samples, responses, Provenance.SEED)
    log.extend(seeds.samples, responses, 0, Provenance.SEED)

    # Resolve hyperparameters once, on the seed round
    template = build_network(oracle.input_dim, oracle.class_count, cfg.substitute_hidden, cfg.seed)
    training, trace = _resolve_with_trace(
        cfg.hyper_strategy, labeled.to_dataset(), target_cfg, template, cfg.seed
    )
    retrain_mode = cfg.effective_retrain_mode()
    logger.info(
        f"Extraction: synthesis={cfg.synthesis.value}, rounds={cfg.duplication_rounds}, "
        f"budget={cfg.budget}, hyper={cfg.hyper_strategy.value}, retrain={retrain_mode.value}"
    )

    substitute = train(template, labeled.to_dataset(), training)
    round_substitutes = [substitute]

    for round_index in range(1, cfg.duplication_rounds + 1):
        remaining = cfg.budget - len(labeled)
        if remaining <= 0:
            flags.append(FLAG_BUDGET_TRUNCATED)
            logger.warning(f"Budget exhausted before round {round_index}")
            break

        # Synthesize children of every labeled sample with the current substitute
        synthetic = generate_synthetic(labeled, substitute, cfg, rng)
        if cfg.reservoir_fraction < 1.0:
            synthetic = reservoir_subsample(synthetic, cfg.reservoir_fraction, rng)

        truncated = len(synthetic) > remaining
        if truncated:
            logger.warning(
                f"Round {round_index}: truncating {len(synthetic)} synthetic queries to {remaining}"
            )
            synthetic = synthetic[:remaining]
            flags.append(FLAG_BUDGET_TRUNCATED)

        # Label the new queries and retrain
        responses = oracle.query_batch(synthetic)
        labeled.extend(synthetic, responses, Provenance.SYNTHETIC)
        log.extend(synthetic, responses, round_index, Provenance.SYNTHETIC)

        # Fresh shuffling and dropout seed per round
        round_training = training.model_copy(update={"seed": training.seed + round_index})
        if retrain_mode == RetrainMode.FROM_SCRATCH:
            start = build_network(
                oracle.input_dim, oracle.class_count, cfg.substitute_hidden, cfg.seed + round_index
            )
        else:
            start = substitute
        substitute = train(start, labeled.to_dataset(), round_training)
        round_substitutes.append(substitute)

        logger.info(
            f"Round {round_index}/{cfg.duplication_rounds}: |L|={len(labeled)}, "
            f"queries={oracle.query_count}"
        )
        if truncated:
            break

    return ExtractionResult(
        substitute=substitute,
        log=log,
        training_config=training,
        round_substitutes=round_substitutes,
        flags=sorted(set(flags)),
        search_trace=trace,
    )


def generate_synthetic(
    labeled: LabeledSet, substitute: Network, cfg: AttackConfig, rng: np.random.Generator
) -> np.ndarray:
    """
    Synthesize the next batch of queries from the labeled set.

    jbda yields one child per parent; trnd and color yield k - 1 children per
    parent, parent-major. Every child lies in [-1, 1].
    """
    if len(labeled) == 0:
        raise EmptyDatasetError("Cannot synthesize from an empty labeled set")
    samples = labeled.samples
    labels = labeled.labels
    k = cfg.expansion_factor

    # JbDA: one Jacobian sign step away from the oracle label
    if cfg.synthesis == Synthesis.JBDA:
        spec = CraftSpec(method=CraftMethod.FGSM, mode=CraftMode.NON_TARGETED, epsilon=cfg.step)
        return craft_batch(substitute, samples, spec, labels)

    if cfg.synthesis in (Synthesis.TRND_FGSM, Synthesis.TRND_IFGSM, Synthesis.COLOR):
        if k > substitute.class_count:
            raise ValueError(
                f"expansion_factor {k} exceeds the number of classes {substitute.class_count}"
            )

    # T-RND: k - 1 distinct random targets per parent, never its own label
    if cfg.synthesis in (Synthesis.TRND_FGSM, Synthesis.TRND_IFGSM):
        classes = np.arange(substitute.class_count)
        targets = np.stack(
            [rng.choice(classes[classes != label], size=k - 1, replace=False) for label in labels]
        ).reshape(-1)
        parents = np.repeat(samples, k - 1, axis=0)
        if cfg.synthesis == Synthesis.TRND_FGSM:
            spec = CraftSpec(method=CraftMethod.FGSM, mode=CraftMode.TARGETED, epsilon=cfg.step)
        else:
            spec = CraftSpec(
                method=CraftMethod.IFGSM,
                mode=CraftMode.TARGETED,
                epsilon=cfg.step,
                steps=cfg.ifgsm_steps,
            )
        return craft_batch(substitute, parents, spec, targets)

    # COLOR: one signed shift per channel, shared by all of its features
    if cfg.synthesis == Synthesis.COLOR:
        n = samples.shape[1]
        channel_of = np.arange(n) % cfg.color_channels
        signs = rng.choice(np.array([-1.0, 1.0]), size=(len(samples), k - 1, cfg.color_channels))
        shifts = cfg.step * signs[:, :, channel_of]
        children = np.clip(samples[:, None, :] + shifts, -1.0, 1.0)
        return children.reshape(-1, n)

    raise ValueError(f"{cfg.synthesis.value} is not a per-round synthesis strategy")


def reservoir_subsample(items: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Keep ceil(fraction * |items|) items chosen uniformly without replacement, in order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = len(items)
    keep = math.ceil(fraction * count - 1e-9)
    if keep >= count:
        return items
    chosen = np.sort(rng.choice(count, size=keep, replace=False))
    return items[chosen]


def tramer_split(budget: int) -> tuple[int, int]:
    """(random-phase queries, line-search queries) for a budget."""
    random_count = budget // 4
    return random_count, budget - random_count


def tramer_attack(
    oracle: Oracle,
    input_dim: int,
    budget: int,
    rng: np.random.Generator,
    strategy: HyperStrategy = HyperStrategy.PAPERNOT_RULE,
    target_cfg: TrainingConfig | None = None,
    hidden: Sequence[int] = (32, 32),
    seed: int = 0,
) -> ExtractionResult:
    """
    Random queries followed by binary line searches between label-discordant pairs.

    A quarter of the budget goes to uniform random points. Each remaining query is
    one step of a depth-10 binary search on the segment between a uniformly chosen
    discordant pair. If every random point has the same label the rest of the budget
    is spent on random points and `degenerate_single_class` is flagged.

    Raises:
        ValueError: If budget < 8
    """
    if budget < MIN_TRAMER_BUDGET:
        raise ValueError(f"tramer_attack needs a budget of at least {MIN_TRAMER_BUDGET}")
    random_count, line_count = tramer_split(budget)
    soft = oracle.response_mode == ResponseMode.PROBABILITIES
    labeled = LabeledSet.empty(input_dim, oracle.class_count, soft)
    log = QueryLog()
    flags: list[str] = []
    segments: list[tuple[int, int, int]] = []

    # Random phase
    points = rng.uniform(-1.0, 1.0, size=(random_count, input_dim))
    responses = oracle.query_batch(points)
    labeled.extend(points, responses, Provenance.RANDOM)
    log.extend(points, responses, 0, Provenance.RANDOM)
    labels = Oracle.labels_of(responses)

    # Pair weights: a point is picked in proportion to its discordant partners
    counts = np.bincount(labels, minlength=oracle.class_count)
    partners = random_count - counts[labels]
    if partners.sum() == 0:
        logger.warning("Random phase found a single class; spending the rest on random queries")
        flags.append(FLAG_DEGENERATE_SINGLE_CLASS)
        extra = rng.uniform(-1.0, 1.0, size=(line_count, input_dim))
        responses = oracle.query_batch(extra)
        labeled.extend(extra, responses, Provenance.RANDOM)
        log.extend(extra, responses, 1, Provenance.RANDOM)
    else:
        pick = partners / partners.sum()
        remaining = line_count
        while remaining > 0:
            i = int(rng.choice(random_count, p=pick))
            j = int(rng.choice(np.flatnonzero(labels != labels[i])))
            low, high = 0.0, 1.0
            for _ in range(min(LINESEARCH_DEPTH, remaining)):
                t = (low + high) / 2
                midpoint = (1 - t) * points[i] + t * points[j]
                response = oracle.query_batch(midpoint[None, :])
                segments.append((len(log), i, j))
                labeled.extend(midpoint[None, :], response, Provenance.LINESEARCH)
                log.extend(midpoint[None, :], response, 1, Provenance.LINESEARCH)
                remaining -= 1
                # Keep the half whose ends still disagree
                if Oracle.labels_of(response)[0] == labels[i]:
                    low = t
                else:
                    high = t

    data = labeled.to_dataset()
    template = build_network(input_dim, oracle.class_count, hidden, seed)
    training, trace = _resolve_with_trace(strategy, data, target_cfg, template, seed)
    substitute = train(template, data, training)
    logger.info(
        f"Line-search extraction: {random_count} random + {line_count} follow-up queries, "
        f"{len(segments)} line-search steps"
    )
    return ExtractionResult(
        substitute=substitute,
        log=log,
        training_config=training,
        round_substitutes=[substitute],
        flags=flags,
        segments=segments,
        search_trace=trace,
    )


def resolve_hyperparameters(
    strategy: HyperStrategy,
    seeds: Dataset,
    target_cfg: TrainingConfig | None = None,
    template: Network | None = None,
    seed: int = 0,
    search_range: HyperRange | None = None,
) -> TrainingConfig:
    """
    Substitute training hyperparameters for a strategy.

    Args:
        strategy: papernot_rule, same or cv_search
        seeds: Labeled data available to the attacker (cv_search only)
        target_cfg: Target model's config (same only)
        template: Substitute architecture (cv_search only)
        seed: Seed for the search and the returned config
        search_range: Learning-rate and epoch box for cv_search

    Raises:
        ValueError: If `same` is requested without target_cfg
    """
    return _resolve_with_trace(strategy, seeds, target_cfg, template, seed, search_range)[0]


def _resolve_with_trace(
    strategy: HyperStrategy,
    seeds: Dataset,
    target_cfg: TrainingConfig | None,
    template: Network | None,
    seed: int,
    search_range: HyperRange | None = None,
) -> tuple[TrainingConfig, list[SearchRecord]]:
    strategy = HyperStrategy(strategy)
    if strategy == HyperStrategy.PAPERNOT_RULE:
        papernot = TrainingConfig(
            optimizer=OptimizerKind.SGD_MOMENTUM,
            learning_rate=0.01,
            momentum=0.9,
            epochs=10,
            seed=seed,
        )
        return papernot, []
    if strategy == HyperStrategy.SAME:
        if target_cfg is None:
            raise ValueError("The 'same' strategy requires the target's training config")
        return target_cfg.model_copy(), []

    from extraction_lab.hyperopt import run_cv_search

    if len(seeds) == 0:
        raise EmptyDatasetError("cv_search needs labeled seed samples")
    if template is None:
        raise ValueError("cv_search requires a substitute template network")
    result = run_cv_search(
        seeds, search_range or HyperRange(), template, np.random.default_rng(seed)
    )
    return result.best.model_copy(update={"seed": seed}), result.trace


def _check_seed_balance(seeds: Dataset, seeds_per_class: int) -> None:
    counts = np.bincount(seeds.labels)
    present = counts[counts > 0]
    if not np.all(present == seeds_per_class):
        logger.warning(
            f"Seed set is not balanced at {seeds_per_class} per class: counts {counts.tolist()}"
        )
