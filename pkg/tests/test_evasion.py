"""Unit tests for the adaptive adversary."""

import numpy as np
import pytest

from extraction_lab.detector import replay_distances
from extraction_lab.evasion import (
    NEGATIVE_CONTROLS,
    negative_control_plan,
    plan_dummy_distances,
    suppresses_alarm,
)
from extraction_lab.models import DetectorConfig, EvasionPlan, PlanEntry, QueryKind

SPIKED = np.concatenate([np.full(100, 0.5), np.full(50, 3.0)])


def test_normal_stream_needs_no_dummies():
    """Test a stream that never fires gets an empty dummy schedule."""
    stream = np.random.default_rng(0).normal(1.0, 0.1, size=150)
    plan = plan_dummy_distances(stream, 0.9, DetectorConfig(), np.random.default_rng(1))
    assert plan.dummy_count == 0
    assert plan.overhead_ratio == 0.0
    assert plan.useful_distances() == pytest.approx(stream.tolist())


def test_plan_suppresses_alarm_on_skewed_stream():
    """Test dummies keep a firing stream below the alarm without touching useful queries."""
    cfg = DetectorConfig(window_min=50)
    stream = np.random.default_rng(2).exponential(size=120)
    assert any(replay_distances(stream, cfg))

    plan = plan_dummy_distances(stream, 0.9, cfg, np.random.default_rng(3))
    assert plan.useful_distances() == stream.tolist()
    assert plan.useful_count == 120
    assert plan.dummy_count > 0 and plan.overhead_ratio > 0
    assert all(e.d_min > 0 for e in plan.entries if e.kind == QueryKind.DUMMY)
    assert suppresses_alarm(plan, 0.9, cfg)


def test_plan_is_deterministic():
    """Test equal seeds give the same schedule."""
    cfg = DetectorConfig(window_min=50)
    stream = np.random.default_rng(4).exponential(size=80)
    a = plan_dummy_distances(stream, 0.9, cfg, np.random.default_rng(5))
    b = plan_dummy_distances(stream, 0.9, cfg, np.random.default_rng(5))
    assert a == b


@pytest.mark.parametrize("strategy", NEGATIVE_CONTROLS)
def test_negative_controls_do_not_suppress_alarm(strategy):
    """Test the naive dummy strategies still fire on a spiked stream."""
    cfg = DetectorConfig()
    plan = negative_control_plan(SPIKED, strategy, 0.9, cfg, np.random.default_rng(6))
    assert plan.useful_distances() == SPIKED.tolist()
    assert not suppresses_alarm(plan, 0.9, cfg)


def test_unknown_negative_control():
    """Test unknown strategy names are rejected."""
    with pytest.raises(ValueError):
        negative_control_plan(SPIKED, "shuffle", 0.9, DetectorConfig(), np.random.default_rng(0))


def test_plan_input_errors():
    """Test empty streams and out-of-range delta."""
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        plan_dummy_distances([], 0.9, DetectorConfig(), rng)
    with pytest.raises(ValueError):
        plan_dummy_distances(SPIKED, 1.0, DetectorConfig(), rng)
    with pytest.raises(ValueError):
        plan_dummy_distances(SPIKED, 0.0, DetectorConfig(), rng)


def test_suppresses_alarm_on_hand_built_plans():
    """Test the replay check on a constant and a normal schedule."""
    cfg = DetectorConfig(window_min=10)
    constant = EvasionPlan(
        entries=[PlanEntry(d_min=1.0, kind=QueryKind.USEFUL)] * 20, useful_count=20, dummy_count=0
    )
    assert not suppresses_alarm(constant, 0.9, cfg)

    values = np.random.default_rng(7).normal(2.0, 0.2, size=60)
    normal = EvasionPlan(
        entries=[PlanEntry(d_min=float(v), kind=QueryKind.USEFUL) for v in values],
        useful_count=60,
        dummy_count=0,
    )
    assert suppresses_alarm(normal, 0.5, cfg)
