"""Unit tests for agreement, transferability and detector metrics."""

import numpy as np
import pytest

from extraction_lab import metrics
from extraction_lab.extraction import QueryLog
from extraction_lab.models import (
    Activation,
    CraftMethod,
    CraftSpec,
    DetectorConfig,
    Provenance,
    Verdict,
    VerdictStatus,
)
from extraction_lab.neuralnet import Layer, Network
from extraction_lab.oracle import Oracle


def _always(label: int, dim: int = 2, classes: int = 3) -> Network:
    bias = np.zeros(classes)
    bias[label] = 5.0
    return Network([Layer(np.zeros((classes, dim)), bias, Activation.SOFTMAX)])


def test_agreement_with_itself(blobs, target_net):
    """Test a copy of the target agrees perfectly and no queries are billed."""
    oracle = Oracle(target_net)
    assert metrics.test_agreement(oracle, target_net, blobs) == 1.0
    assert oracle.query_count == 0


def test_agreement_of_constant_substitute(blobs, target_net):
    """Test macro F-score against a hand computation."""
    truth = target_net.predict(blobs.samples)
    share = float(np.mean(truth == 0))
    classes = len(np.union1d(truth, [0]))
    expected = (2 * share / (1 + share)) / classes
    assert metrics.test_agreement(target_net, _always(0), blobs) == pytest.approx(expected)


def test_ru_agreement_of_constant_substitute(target_net):
    """Test RU-agreement equals the target's share of class 0 on the same uniform points."""
    points = np.random.default_rng(11).uniform(-1.0, 1.0, size=(2000, 2))
    expected = float(np.mean(target_net.predict(points) == 0))
    got = metrics.ru_agreement(target_net, _always(0), 2000, np.random.default_rng(11))
    assert got == pytest.approx(expected)
    assert metrics.ru_agreement(target_net, target_net, 500) == 1.0


def test_transferability_bounds(blobs, target_net):
    """Test zero epsilon transfers nothing and a white-box attack transfers something."""
    seeds = blobs.subset(np.arange(0, 180, 9))
    none = metrics.transferability(target_net, target_net, seeds, CraftSpec(epsilon=0.0))
    assert none == (0.0, 0.0)

    spec = CraftSpec(method=CraftMethod.IFGSM, epsilon=0.5)
    targeted, non_targeted = metrics.transferability(target_net, target_net, seeds, spec)
    assert 0.0 <= targeted <= 1.0
    assert 0.0 < non_targeted <= 1.0


def test_fpr_chunks():
    """Test chunked false-positive rates."""
    flags = [False] * 6000
    flags[120] = True
    assert metrics.fpr(flags) == pytest.approx(1 / 120)
    assert metrics.fpr([False] * 59 + [True]) == 0.5
    assert metrics.fpr([]) == 0.0

    verdicts = [Verdict(index=i, label=0, status=VerdictStatus.BENIGN) for i in range(100)]
    verdicts[-1] = Verdict(index=99, label=0, status=VerdictStatus.ATTACK, attack=True)
    assert metrics.fpr(verdicts, chunk=25) == 0.25


def test_detection_speed(target_net):
    """Test a log of identical queries is caught right after the window."""
    log = QueryLog()
    samples = np.zeros((30, 2))
    log.extend(samples, np.zeros(30, dtype=np.int64), 0, Provenance.SEED)
    cfg = DetectorConfig(window_min=10)
    assert metrics.detection_speed(log, cfg) == 12
    assert metrics.detection_speed(log, cfg, target=target_net) == 12
    assert metrics.detection_speed(QueryLog(), cfg) is None
