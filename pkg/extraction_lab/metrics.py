"""Agreement, transferability and detector evaluation metrics."""

import logging
import math
from collections.abc import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from extraction_lab.crafting import craft_batch
from extraction_lab.detector import first_alarm, replay
from extraction_lab.exceptions import EmptyDatasetError
from extraction_lab.extraction import QueryLog
from extraction_lab.models import CraftMode, CraftSpec, DetectorConfig, Verdict
from extraction_lab.neuralnet import Dataset, Network
from extraction_lab.oracle import Oracle

logger = logging.getLogger(__name__)

RU_SAMPLES = 4000
FPR_CHUNK = 50


def _network(model: Oracle | Network) -> Network:
    # Evaluation reads the target directly so it is never billed as queries.
    return model.network if isinstance(model, Oracle) else model


def test_agreement(target: Oracle | Network, substitute: Network, test: Dataset) -> float:
    """
    Macro-averaged F-score of substitute predictions against target predictions.

    Classes present in either prediction set are averaged; a class absent from
    the target's predictions contributes 0.
    """
    if len(test) == 0:
        raise EmptyDatasetError("test_agreement needs a non-empty test set")
    truth = _network(target).predict(test.samples)
    predicted = substitute.predict(test.samples)
    labels = np.union1d(truth, predicted)
    return float(f1_score(truth, predicted, labels=labels, average="macro", zero_division=0))


test_agreement.__test__ = False  # type: ignore[attr-defined]  # not a pytest test


def ru_agreement(
    target: Oracle | Network,
    substitute: Network,
    n: int = RU_SAMPLES,
    rng: np.random.Generator | None = None,
) -> float:
    """Label agreement on n points drawn uniformly from [-1, 1]^d."""
    rng = rng or np.random.default_rng(0)
    net = _network(target)
    points = rng.uniform(-1.0, 1.0, size=(n, net.input_dim))
    return float(accuracy_score(net.predict(points), substitute.predict(points)))


def transferability(
    target: Oracle | Network, substitute: Network, seeds: Dataset, spec: CraftSpec
) -> tuple[float, float]:
    """
    Success rates of examples crafted on the substitute against the target.

    Non-targeted: the target's label of x' differs from its label of x.
    Targeted: the target labels x' as the declared target, averaged over one
    variant per class other than the substitute's prediction of x.

    Returns:
        (targeted rate, non-targeted rate)
    """
    if len(seeds) == 0:
        raise EmptyDatasetError("transferability needs seed samples")
    net = _network(target)
    samples = seeds.samples
    sub_labels = substitute.predict(samples)

    untargeted_spec = spec.model_copy(update={"mode": CraftMode.NON_TARGETED})
    crafted = craft_batch(substitute, samples, untargeted_spec, sub_labels)
    non_targeted = float(np.mean(net.predict(crafted) != net.predict(samples)))

    # One targeted variant per class other than the substitute's label
    classes = np.arange(substitute.class_count)
    targets = np.concatenate([classes[classes != c] for c in sub_labels])
    parents = np.repeat(samples, substitute.class_count - 1, axis=0)
    targeted_spec = spec.model_copy(update={"mode": CraftMode.TARGETED})
    crafted = craft_batch(substitute, parents, targeted_spec, targets)
    targeted = float(np.mean(net.predict(crafted) == targets)) if len(targets) else 0.0

    logger.debug(
        f"Transferability ({spec.method.value}, eps={spec.epsilon:.4f}): "
        f"targeted={targeted:.3f}, non-targeted={non_targeted:.3f}"
    )
    return targeted, non_targeted


def fpr(verdicts: Sequence[Verdict] | Sequence[bool], chunk: int = FPR_CHUNK) -> float:
    """Fraction of consecutive chunks (last one may be partial) containing an attack verdict."""
    flags = [v.attack if isinstance(v, Verdict) else bool(v) for v in verdicts]
    if not flags:
        return 0.0
    chunks = math.ceil(len(flags) / chunk)
    flagged = sum(any(flags[i * chunk : (i + 1) * chunk]) for i in range(chunks))
    return flagged / chunks


def detection_speed(
    log: QueryLog, cfg: DetectorConfig, target: Oracle | Network | None = None
) -> int | None:
    """
    1-based number of queries until the first attack verdict on a replayed log.

    Classes come from the target's predictions when given, else from the logged labels.
    """
    if len(log) == 0:
        return None
    samples = log.samples()
    labels = _network(target).predict(samples) if target is not None else log.labels()
    return first_alarm(replay(samples, labels, cfg))
