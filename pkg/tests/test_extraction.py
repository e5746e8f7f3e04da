"""Unit tests for the extraction attacks and the prediction API."""

import numpy as np
import pytest

from extraction_lab import metrics
from extraction_lab.datasets import select_seeds
from extraction_lab.exceptions import EmptyDatasetError
from extraction_lab.extraction import (
    FLAG_BUDGET_TRUNCATED,
    FLAG_DEGENERATE_SINGLE_CLASS,
    LabeledSet,
    generate_synthetic,
    reservoir_subsample,
    resolve_hyperparameters,
    run_extraction,
    tramer_attack,
    tramer_split,
)
from extraction_lab.models import (
    Activation,
    AttackConfig,
    CraftSpec,
    HyperStrategy,
    OptimizerKind,
    Provenance,
    ResponseMode,
    RetrainMode,
    Synthesis,
    TrainingConfig,
)
from extraction_lab.neuralnet import Dataset, Layer, Network, build_network
from extraction_lab.oracle import Oracle


def _seeds(blobs: Dataset, per_class: int = 5, seed: int = 0) -> Dataset:
    return select_seeds(blobs, per_class, np.random.default_rng(seed))


def _constant_net(dim: int = 2) -> Network:
    return Network([Layer(np.zeros((3, dim)), np.array([5.0, 0.0, 0.0]), Activation.SOFTMAX)])


def test_oracle_counts_every_answer(target_net):
    """Test the query counter and both response formats."""
    oracle = Oracle(target_net)
    x = np.zeros((4, 2))
    labels = oracle.query_batch(x)
    assert labels.shape == (4,)
    assert oracle.query(x[0]) == labels[0]
    assert oracle.query_count == 5

    soft = Oracle(target_net, ResponseMode.PROBABILITIES)
    probs = soft.query_batch(x)
    assert probs.shape == (4, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_jbda_round_arithmetic(blobs, target_net):
    """Test JbDA doubles the labeled set each round and logs in oracle order."""
    oracle = Oracle(target_net)
    seeds = _seeds(blobs)
    cfg = AttackConfig(seeds_per_class=5, budget=1000, duplication_rounds=3, seed=1)
    result = run_extraction(oracle, seeds, cfg)

    assert len(result.log) == 15 * 2**3
    assert oracle.query_count == len(result.log)
    assert [r.index for r in result.log] == list(range(len(result.log)))
    assert [r.round for r in result.log][:15] == [0] * 15
    assert result.log.records[15].provenance == Provenance.SYNTHETIC
    assert len(result.round_substitutes) == 4
    assert result.flags == []


def test_budget_truncates_last_round(blobs, target_net):
    """Test a round exceeding the budget is truncated and flagged."""
    oracle = Oracle(target_net)
    cfg = AttackConfig(seeds_per_class=5, budget=50, duplication_rounds=3, seed=1)
    result = run_extraction(oracle, _seeds(blobs), cfg)
    assert len(result.log) == 50
    assert oracle.query_count == 50
    assert FLAG_BUDGET_TRUNCATED in result.flags


def test_seed_errors(blobs, target_net):
    """Test empty seed sets and seed sets over budget are rejected."""
    oracle = Oracle(target_net)
    empty = Dataset(np.empty((0, 2)), np.empty(0, dtype=np.int64))
    with pytest.raises(EmptyDatasetError):
        run_extraction(oracle, empty, AttackConfig())
    with pytest.raises(ValueError):
        run_extraction(oracle, _seeds(blobs), AttackConfig(seeds_per_class=5, budget=10))


def test_trnd_children_target_other_classes(blobs, target_net):
    """Test T-RND yields k - 1 bounded children per parent, parent-major."""
    seeds = _seeds(blobs)
    labeled = LabeledSet.empty(2, 3, soft=False)
    labeled.extend(seeds.samples, target_net.predict(seeds.samples), Provenance.SEED)
    cfg = AttackConfig(synthesis=Synthesis.TRND_IFGSM, expansion_factor=3, step=0.2)
    children = generate_synthetic(labeled, target_net, cfg, np.random.default_rng(0))

    assert children.shape == (30, 2)
    parents = np.repeat(seeds.samples, 2, axis=0)
    assert np.max(np.abs(children - parents)) <= 0.2 + 1e-9


def test_trnd_expansion_cannot_exceed_classes(blobs, target_net):
    """Test k > m is rejected."""
    labeled = LabeledSet.empty(2, 3, soft=False)
    labeled.extend(blobs.samples[:3], np.array([0, 1, 2]), Provenance.SEED)
    cfg = AttackConfig(synthesis=Synthesis.TRND_FGSM, expansion_factor=4)
    with pytest.raises(ValueError):
        generate_synthetic(labeled, target_net, cfg, np.random.default_rng(0))


def test_jbda_children_within_step(blobs, target_net):
    """Test JbDA children are one signed step from their parents."""
    seeds = _seeds(blobs)
    labeled = LabeledSet.empty(2, 3, soft=False)
    labeled.extend(seeds.samples, target_net.predict(seeds.samples), Provenance.SEED)
    cfg = AttackConfig(step=0.1)
    children = generate_synthetic(labeled, target_net, cfg, np.random.default_rng(0))
    assert children.shape == seeds.samples.shape
    assert np.max(np.abs(children - seeds.samples)) <= 0.1 + 1e-9


def test_color_shifts_whole_channels():
    """Test COLOR moves every feature of a channel by the same signed step."""
    samples = np.zeros((4, 6))
    labeled = LabeledSet.empty(6, 3, soft=False)
    labeled.extend(samples, np.array([0, 1, 2, 0]), Provenance.SEED)
    cfg = AttackConfig(synthesis=Synthesis.COLOR, expansion_factor=3, step=0.1, color_channels=3)
    children = generate_synthetic(labeled, build_network(6, 3, seed=0), cfg, np.random.default_rng(5))

    assert children.shape == (8, 6)
    np.testing.assert_allclose(np.abs(children), 0.1)
    np.testing.assert_array_equal(children[:, :3], children[:, 3:])


def test_reservoir_subsample_size_and_order(rng):
    """Test the kept count and relative order."""
    items = np.arange(100)
    kept = reservoir_subsample(items, 0.25, rng)
    assert len(kept) == 25
    assert np.all(np.diff(kept) > 0)
    assert len(reservoir_subsample(items, 1.0, rng)) == 100
    with pytest.raises(ValueError):
        reservoir_subsample(items, 0.0, rng)


def test_reservoir_subsample_is_uniform():
    """Test selection frequencies stay within 3 sigma of uniform."""
    rng = np.random.default_rng(42)
    items = np.arange(10)
    trials = 10_000
    counts = np.zeros(10)
    for _ in range(trials):
        counts[reservoir_subsample(items, 0.3, rng)] += 1
    expected = trials * 0.3
    sigma = np.sqrt(trials * 0.3 * 0.7)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_tramer_split():
    """Test a quarter of the budget goes to random queries."""
    assert tramer_split(100) == (25, 75)
    assert tramer_split(8) == (2, 6)


def test_tramer_attack_line_search(target_net):
    """Test random phase, line-search steps and billing."""
    oracle = Oracle(target_net)
    result = tramer_attack(oracle, 2, 40, np.random.default_rng(3))

    assert len(result.log) == 40
    assert oracle.query_count == 40
    provenance = [r.provenance for r in result.log]
    assert provenance[:10] == [Provenance.RANDOM] * 10
    assert provenance[10:] == [Provenance.LINESEARCH] * 30
    assert len(result.segments) == 30
    random_labels = result.log.labels()[:10]
    assert all(random_labels[i] != random_labels[j] for _, i, j in result.segments)


def test_tramer_attack_degenerate_single_class():
    """Test a constant oracle falls back to random queries and is flagged."""
    oracle = Oracle(_constant_net())
    result = tramer_attack(oracle, 2, 20, np.random.default_rng(0))
    assert FLAG_DEGENERATE_SINGLE_CLASS in result.flags
    assert len(result.log) == 20
    assert result.segments == []


def test_tramer_attack_minimum_budget(target_net):
    """Test budgets below eight are rejected."""
    with pytest.raises(ValueError):
        tramer_attack(Oracle(target_net), 2, 7, np.random.default_rng(0))


def test_run_extraction_dispatches_tramer(target_net, blobs):
    """Test the tramer synthesis bypasses the round loop."""
    oracle = Oracle(target_net)
    cfg = AttackConfig(synthesis=Synthesis.TRAMER, budget=40, seed=2)
    result = run_extraction(oracle, _seeds(blobs), cfg)
    assert len(result.log) == 40
    assert len(result.segments) == 30


def test_resolve_hyperparameters():
    """Test the fixed rule and the copied target config."""
    data = Dataset(np.zeros((5, 2)), np.zeros(5, dtype=np.int64))
    rule = resolve_hyperparameters(HyperStrategy.PAPERNOT_RULE, data)
    assert rule.optimizer == OptimizerKind.SGD_MOMENTUM
    assert (rule.learning_rate, rule.momentum, rule.epochs) == (0.01, 0.9, 10)

    target_cfg = TrainingConfig(learning_rate=0.003, epochs=42)
    same = resolve_hyperparameters(HyperStrategy.SAME, data, target_cfg)
    assert same == target_cfg and same is not target_cfg
    with pytest.raises(ValueError):
        resolve_hyperparameters(HyperStrategy.SAME, data)


def test_retrain_mode_defaults():
    """Test incremental retraining is only the default for the fixed rule."""
    assert AttackConfig().effective_retrain_mode() == RetrainMode.INCREMENTAL
    cv = AttackConfig(hyper_strategy=HyperStrategy.CV_SEARCH)
    assert cv.effective_retrain_mode() == RetrainMode.FROM_SCRATCH


def test_probabilities_mode_trains_on_soft_targets(blobs, target_net):
    """Test probability responses are logged and used as targets."""
    oracle = Oracle(target_net, ResponseMode.PROBABILITIES)
    cfg = AttackConfig(
        seeds_per_class=5, budget=200, duplication_rounds=2, response_mode=ResponseMode.PROBABILITIES
    )
    result = run_extraction(oracle, _seeds(blobs), cfg)
    assert all(r.probabilities is not None for r in result.log)
    assert len(result.log) == 60


RUNS = 10


def _agreements(blobs, target_net, cfg: AttackConfig, response_mode=ResponseMode.LABELS):
    """Round-0 and final test-agreement of one extraction run."""
    oracle = Oracle(target_net, response_mode)
    result = run_extraction(oracle, _seeds(blobs, cfg.seeds_per_class, seed=cfg.seed), cfg)
    first = metrics.test_agreement(target_net, result.round_substitutes[0], blobs)
    final = metrics.test_agreement(target_net, result.substitute, blobs)
    return first, final, result


@pytest.mark.parametrize("synthesis", [Synthesis.JBDA, Synthesis.TRND_FGSM])
def test_rounds_improve_agreement(blobs, target_net, synthesis):
    """Test five rounds beat the seed-only substitute in at least nine of ten runs."""
    improved = 0
    for seed in range(RUNS):
        cfg = AttackConfig(
            seeds_per_class=2, budget=10_000, duplication_rounds=5, synthesis=synthesis, seed=seed
        )
        first, final, _ = _agreements(blobs, target_net, cfg)
        improved += final > first
    assert improved >= RUNS - 1


def test_cv_search_matches_or_beats_fixed_rule(blobs, target_net):
    """Test cross-validated hyperparameters give at least the fixed rule's mean agreement."""
    finals = {HyperStrategy.PAPERNOT_RULE: [], HyperStrategy.CV_SEARCH: []}
    for seed in range(RUNS):
        for strategy, scores in finals.items():
            cfg = AttackConfig(
                seeds_per_class=5,
                budget=10_000,
                duplication_rounds=5,
                hyper_strategy=strategy,
                substitute_hidden=[16, 16],
                seed=seed,
            )
            scores.append(_agreements(blobs, target_net, cfg)[1])
    assert np.mean(finals[HyperStrategy.CV_SEARCH]) >= np.mean(finals[HyperStrategy.PAPERNOT_RULE])


def test_probabilities_transfer_at_least_as_well_as_labels(blobs, target_net):
    """Test substitutes trained on probabilities transfer at least as well on average."""
    rates = {ResponseMode.LABELS: [], ResponseMode.PROBABILITIES: []}
    for seed in range(RUNS):
        for mode, scores in rates.items():
            cfg = AttackConfig(
                seeds_per_class=2, budget=10_000, duplication_rounds=5, response_mode=mode, seed=seed
            )
            _, _, result = _agreements(blobs, target_net, cfg, response_mode=mode)
            scores.append(np.mean(metrics.transferability(target_net, result.substitute, blobs, CraftSpec())))
    assert np.mean(rates[ResponseMode.PROBABILITIES]) >= np.mean(rates[ResponseMode.LABELS])
