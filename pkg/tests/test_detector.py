"""Unit tests for the PRADA detector."""

import json

import numpy as np
import pytest

from extraction_lab.detector import (
    ClientState,
    PradaDetector,
    decide,
    distance,
    first_alarm,
    replay,
    replay_client,
    replay_distances,
    replay_w_stream,
    respond,
    threshold_verdicts,
)
from extraction_lab.exceptions import InputShapeError, QueryDeniedError
from extraction_lab.models import (
    DetectorConfig,
    DistanceMetric,
    ResponseMode,
    ResponsePolicy,
    Verdict,
    VerdictStatus,
)
from extraction_lab.oracle import Oracle

SPIKED = np.concatenate([np.full(100, 0.5), np.full(50, 3.0)])


def test_distance_metrics():
    """Test L2 and L1 distances and their symmetry."""
    assert distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == pytest.approx(5.0)
    assert distance(np.array([0.0, 0.0]), np.array([3.0, -4.0]), DistanceMetric.L1) == pytest.approx(7.0)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=5), rng.normal(size=5)
    assert distance(x, y) == distance(y, x)
    with pytest.raises(InputShapeError):
        distance(np.zeros(2), np.zeros(3))


def test_growing_set_hand_trace():
    """Test d_min values, admissions and thresholds on a 1-D stream."""
    cfg = DetectorConfig(window_min=100)
    state = ClientState()
    verdicts = [state.observe(np.array([v]), 0, cfg) for v in (0.0, 2.0, 4.0, 6.0, 8.0, 8.5)]

    assert verdicts[0].d_min is None
    assert [v.d_min for v in verdicts[1:]] == pytest.approx([2.0, 2.0, 2.0, 2.0, 0.5])
    assert state.distances == pytest.approx([2.0, 2.0, 2.0, 2.0, 0.5])
    assert state.class_distances[0] == pytest.approx([0.0, 2.0, 2.0, 2.0, 2.0])
    # mean 1.6 minus the population std 0.8 of the admitted distances
    assert state.thresholds[0] == pytest.approx(0.8)
    # 0.5 is below the threshold, so 8.5 was not admitted
    assert state.growing_set(0).shape == (5, 1)
    assert [v.index for v in verdicts] == list(range(6))
    assert all(v.status == VerdictStatus.WARMING_UP for v in verdicts)


def test_threshold_never_blocks_small_early_distances():
    """Test a nearby second query is admitted while the threshold is still zero."""
    cfg = DetectorConfig(window_min=100)
    state = ClientState()
    for v in (0.0, 1.0, 1.05):
        state.observe(np.array([v]), 0, cfg)
    assert state.class_distances[0] == pytest.approx([0.0, 1.0, 0.05])
    assert state.thresholds[0] == 0.0
    assert state.growing_set(0).shape == (3, 1)


def test_first_query_of_class_adds_no_distance():
    """Test each new class starts its own growing set without extending D."""
    state = ClientState()
    cfg = DetectorConfig()
    for label in range(4):
        state.observe(np.full(3, float(label) / 4), label, cfg)
    assert state.distances == []
    assert sorted(state.thresholds) == [0, 1, 2, 3]


def test_no_decision_inside_window():
    """Test queries are warming up until D is longer than window_min."""
    cfg = DetectorConfig(window_min=20)
    samples = np.random.default_rng(1).uniform(-1, 1, size=(40, 2))
    verdicts = replay(samples, np.zeros(40, dtype=int), cfg)
    for v in verdicts:
        # one class, so |D| equals the query index
        if v.index <= 20:
            assert v.status == VerdictStatus.WARMING_UP and v.current_w is None
        else:
            assert v.status != VerdictStatus.WARMING_UP and v.current_w is not None


def test_decide_normal_and_spiked_streams():
    """Test normal distances are benign and a two-spike stream is an attack."""
    cfg = DetectorConfig(delta=0.9)
    normal = decide(np.random.default_rng(3).normal(1.0, 0.1, size=150), cfg)
    assert not normal.attack and normal.w > 0.9

    spiked = decide(SPIKED, cfg)
    assert spiked.attack and spiked.w < 0.9
    assert spiked.trimmed_count == 0


def test_decide_threshold_is_strict():
    """Test W equal to delta is benign."""
    values = np.random.default_rng(4).exponential(size=120)
    w = decide(values, DetectorConfig(delta=0.5)).w
    assert not decide(values, DetectorConfig(delta=w)).attack


def test_decide_trims_outliers():
    """Test values beyond 3 sigma are dropped before the test."""
    values = np.append(np.random.default_rng(5).normal(1.0, 0.1, size=200), 50.0)
    decision = decide(values, DetectorConfig())
    assert decision.trimmed_count == 1
    assert not decision.attack


def test_decide_degenerate_stream():
    """Test a constant stream is an attack with W = 0."""
    decision = decide(np.full(120, 0.7), DetectorConfig())
    assert decision.attack and decision.degenerate and decision.w == 0.0


def test_alarm_is_sticky():
    """Test the alarm records the first attack verdict and survives recovery."""
    cfg = DetectorConfig(window_min=3, freeze_on_alarm=False)
    state = ClientState()
    for _ in range(5):
        state.observe(np.zeros(2), 0, cfg)
    assert state.alarm and state.alarm_index == 5

    rng = np.random.default_rng(6)
    for x in rng.uniform(-1, 1, size=(200, 2)):
        state.observe(x, 0, cfg)
    assert state.alarm and state.alarm_index == 5


def test_respond_policies():
    """Test flag, deceive and block responses."""
    probs = np.array([0.6, 0.3, 0.1])
    quiet = Verdict(index=0, label=0, status=VerdictStatus.BENIGN)
    alarmed = Verdict(index=0, label=0, status=VerdictStatus.ATTACK, attack=True, alarm=True)

    assert respond(alarmed, probs, ResponsePolicy.FLAG).label == 0
    assert respond(quiet, probs, ResponsePolicy.DECEIVE).label == 0

    deceived = respond(alarmed, probs, ResponsePolicy.DECEIVE)
    assert deceived.label == 1
    assert deceived.probabilities == pytest.approx([0.3, 0.6, 0.1])

    blocked = respond(alarmed, probs, ResponsePolicy.BLOCK)
    assert blocked.denied and blocked.label is None and blocked.probabilities is None


def test_blocked_client_cannot_query():
    """Test observe raises once a blocking alarm is set."""
    cfg = DetectorConfig(window_min=3, response_mode=ResponsePolicy.BLOCK)
    state = ClientState()
    for _ in range(5):
        state.observe(np.zeros(2), 0, cfg)
    assert state.blocked
    with pytest.raises(QueryDeniedError):
        state.observe(np.zeros(2), 0, cfg)


def test_defended_oracle_denies_after_alarm(target_net):
    """Test the detector-wrapped API stops answering a flagged client."""
    detector = PradaDetector(DetectorConfig(window_min=3, response_mode=ResponsePolicy.BLOCK))
    oracle = Oracle(target_net, detector=detector)
    with pytest.raises(QueryDeniedError) as denied:
        oracle.query_batch(np.zeros((10, 2)))
    assert oracle.query_count == 4
    assert detector.clients["attacker"].alarm_index == 5
    assert denied.value.answered.tolist() == target_net.predict(np.zeros((4, 2))).tolist()


def test_denied_batch_bills_exactly_the_answers_returned(target_net):
    """Test a mid-batch block bills only the responses handed back, in either format."""
    for mode, shape in ((ResponseMode.LABELS, (4,)), (ResponseMode.PROBABILITIES, (4, 3))):
        detector = PradaDetector(DetectorConfig(window_min=3, response_mode=ResponsePolicy.BLOCK))
        oracle = Oracle(target_net, mode, detector=detector)
        with pytest.raises(QueryDeniedError) as denied:
            oracle.query_batch(np.zeros((10, 2)))
        assert denied.value.answered.shape == shape
        assert oracle.query_count == len(denied.value.answered)

        with pytest.raises(QueryDeniedError) as again:
            oracle.query_batch(np.zeros((3, 2)))
        assert len(again.value.answered) == 0
        assert oracle.query_count == 4


def test_detector_keeps_clients_apart():
    """Test per-client state is independent."""
    detector = PradaDetector(DetectorConfig())
    probs = np.array([0.1, 0.9])
    for i in range(10):
        detector.process("a", np.array([float(i), 0.0]), probs)
    detector.process("b", np.array([0.0, 0.0]), probs)
    assert detector.clients["a"].queries_seen == 10
    assert detector.clients["b"].queries_seen == 1
    assert detector.clients["b"].distances == []


def test_replay_is_deterministic(target_net):
    """Test replaying the same queries twice gives identical verdicts."""
    samples = np.random.default_rng(7).uniform(-1, 1, size=(150, 2))
    labels = target_net.predict(samples)
    cfg = DetectorConfig(window_min=30)
    assert replay(samples, labels, cfg) == replay(samples, labels, cfg)


def test_replay_ignores_block_policy():
    """Test replays keep going after an alarm."""
    cfg = DetectorConfig(window_min=3, response_mode=ResponsePolicy.BLOCK)
    verdicts, state = replay_client(np.zeros((10, 2)), np.zeros(10, dtype=int), cfg)
    assert len(verdicts) == 10
    assert not state.blocked
    assert first_alarm(verdicts) == 5


def test_snapshot_round_trip():
    """Test a restored state produces the same verdicts as the original."""
    rng = np.random.default_rng(8)
    cfg = DetectorConfig(window_min=10)
    samples = rng.uniform(-1, 1, size=(60, 3))
    labels = rng.integers(0, 3, size=60)
    _, state = replay_client(samples[:40], labels[:40], cfg)
    restored = ClientState.from_snapshot(json.loads(json.dumps(state.snapshot())))

    for x, c in zip(samples[40:], labels[40:], strict=True):
        assert state.observe(x, int(c), cfg) == restored.observe(x, int(c), cfg)
    assert restored.growing_set_bytes == state.growing_set_bytes

    with pytest.raises(ValueError):
        ClientState.from_snapshot({"version": 99})


def test_threshold_verdicts_monotone_in_delta(target_net):
    """Test raising delta never clears a flag."""
    samples = np.random.default_rng(9).uniform(-1, 1, size=(300, 2))
    stream = replay_w_stream(samples, target_net.predict(samples), DetectorConfig(window_min=50))
    low = threshold_verdicts(stream, 0.8)
    high = threshold_verdicts(stream, 0.95)
    assert all(h or not lo for lo, h in zip(low, high, strict=True))
    assert low[:50] == [False] * 50


def test_replay_distances_checkpoints():
    """Test raw stream replay reports None during warm-up."""
    cfg = DetectorConfig(window_min=100)
    out = replay_distances(SPIKED, cfg)
    assert out[:100] == [None] * 100
    assert out[-1] is True
