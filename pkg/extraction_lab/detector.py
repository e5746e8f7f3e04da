"""
PRADA: per-client streaming detection of model extraction.

Each client keeps a growing set per predicted class. Every new query of a known
class contributes its minimum distance to that set (d_min) to the client's
stream D. Once D is longer than the warm-up window, D is trimmed at 3 sigma and
the client is flagged when the Shapiro-Wilk W of the trimmed stream drops
below delta. Standard deviations use the population convention (divide by n).
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from extraction_lab.exceptions import DegenerateSampleError, InputShapeError, QueryDeniedError
from extraction_lab.models import (
    DefendedResponse,
    DetectorConfig,
    DistanceMetric,
    ResponsePolicy,
    Verdict,
    VerdictStatus,
)
from extraction_lab.shapiro import MIN_SAMPLES, shapiro_w

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


def distance(x: np.ndarray, y: np.ndarray, metric: DistanceMetric = DistanceMetric.L2) -> float:
    """L2 or L1 distance between two samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputShapeError(f"Cannot compare samples of shapes {x.shape} and {y.shape}")
    return float(_distances_to(x[None, ...].reshape(1, -1), y.ravel(), metric)[0])


def _distances_to(points: np.ndarray, x: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    diff = points - x
    if metric == DistanceMetric.L1:
        return np.abs(diff).sum(axis=1)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass(frozen=True)
class Decision:
    """Outcome of the normality test on a distance stream."""

    attack: bool
    w: float
    trimmed_count: int
    degenerate: bool = False


def decide(distances: Sequence[float] | np.ndarray, cfg: DetectorConfig) -> Decision:
    """
    Trim D at outlier_sigmas population standard deviations and threshold W.

    attack is W(D') < delta, so W equal to delta is benign. A trimmed stream with
    fewer than three values or no spread counts as an attack with W = 0.
    Callers only consult this once |D| exceeds the warm-up window.
    """
    values = np.asarray(distances, dtype=np.float64)
    mean = values.mean() if len(values) else 0.0
    spread = values.std() if len(values) else 0.0
    # Population std, one pass: the bound is not recomputed on the kept values.
    kept = values[np.abs(values - mean) <= cfg.outlier_sigmas * spread]
    trimmed = len(values) - len(kept)

    if len(kept) < MIN_SAMPLES:
        logger.debug(f"Degenerate distance stream: {len(kept)} values after trimming")
        return Decision(attack=True, w=0.0, trimmed_count=trimmed, degenerate=True)
    try:
        w = shapiro_w(kept)
    except DegenerateSampleError:
        logger.debug(f"Degenerate distance stream: {len(kept)} equal values")
        return Decision(attack=True, w=0.0, trimmed_count=trimmed, degenerate=True)
    return Decision(attack=w < cfg.delta, w=w, trimmed_count=trimmed)


class _GrowingSet:
    """Append-only sample buffer with amortized doubling."""

    def __init__(self, first: np.ndarray, capacity: int = 16):
        self._buffer = np.empty((capacity, first.shape[0]))
        self._buffer[0] = first
        self.size = 1

    def append(self, x: np.ndarray) -> None:
        if self.size == len(self._buffer):
            grown = np.empty((2 * len(self._buffer), self._buffer.shape[1]))
            grown[: self.size] = self._buffer
            self._buffer = grown
        self._buffer[self.size] = x
        self.size += 1

    def view(self) -> np.ndarray:
        return self._buffer[: self.size]

    @property
    def nbytes(self) -> int:
        return self.size * self._buffer.shape[1] * self._buffer.itemsize


class ClientState:
    """
    Detection state of one client.

    Attributes:
        distances: Stream D of d_min values, in query order
        class_distances: D_Gc per class (starts with the initializing 0)
        thresholds: T_c per class
        attack: Live verdict of the latest test (may recover)
        alarm: Sticky flag set by the first attack verdict
        alarm_index: 1-based query count at the first attack verdict
    """

    def __init__(self) -> None:
        self.input_dim: int | None = None
        self.queries_seen = 0
        self.distances: list[float] = []
        self.class_distances: dict[int, list[float]] = {}
        self.thresholds: dict[int, float] = {}
        self.attack = False
        self.alarm = False
        self.alarm_index: int | None = None
        self.blocked = False
        self._growing: dict[int, _GrowingSet] = {}

    def growing_set(self, label: int) -> np.ndarray:
        """Samples retained for a class (read-only view)."""
        view = self._growing[label].view()
        view.flags.writeable = False
        return view

    @property
    def growing_set_bytes(self) -> int:
        return sum(g.nbytes for g in self._growing.values())

    def observe(self, x: np.ndarray, label: int, cfg: DetectorConfig) -> Verdict:
        """
        Process one query whose target prediction is `label`.

        Raises:
            QueryDeniedError: If the client was blocked by an earlier alarm
            InputShapeError: If x does not match the dimensionality seen so far
        """
        if self.blocked:
            raise QueryDeniedError("Client is blocked after an extraction alarm")
        sample = np.asarray(x, dtype=np.float64).ravel()
        if self.input_dim is None:
            self.input_dim = sample.shape[0]
        elif sample.shape[0] != self.input_dim:
            raise InputShapeError(f"Expected {self.input_dim} features, got {sample.shape[0]}")

        self.queries_seen += 1
        label = int(label)
        d_min: float | None = None

        if label not in self._growing:
            # First query of a class seeds its set and adds nothing to D.
            self._growing[label] = _GrowingSet(sample)
            self.class_distances[label] = [0.0]
            self.thresholds[label] = 0.0
        else:
            d_min = float(_distances_to(self._growing[label].view(), sample, cfg.distance_metric).min())
            self.distances.append(d_min)
            frozen = self.alarm and cfg.freeze_on_alarm
            if not frozen and d_min > self.thresholds[label]:
                self._growing[label].append(sample)
                admitted = self.class_distances[label]
                admitted.append(d_min)
                # T_c only rises, so a saturated set stops growing.
                self.thresholds[label] = max(
                    self.thresholds[label], float(np.mean(admitted) - np.std(admitted))
                )

        if len(self.distances) <= cfg.window_min:
            return Verdict(
                index=self.queries_seen - 1,
                label=label,
                status=VerdictStatus.WARMING_UP,
                d_min=d_min,
                alarm=self.alarm,
            )

        decision = decide(self.distances, cfg)
        self.attack = decision.attack
        if decision.attack and not self.alarm:
            self.alarm = True
            self.alarm_index = self.queries_seen
            logger.warning(
                f"Extraction alarm after {self.queries_seen} queries (W={decision.w:.4f} < {cfg.delta})"
            )
        if self.alarm and cfg.response_mode == ResponsePolicy.BLOCK:
            self.blocked = True

        return Verdict(
            index=self.queries_seen - 1,
            label=label,
            status=VerdictStatus.ATTACK if decision.attack else VerdictStatus.BENIGN,
            current_w=decision.w,
            d_min=d_min,
            trimmed_count=decision.trimmed_count,
            attack=decision.attack,
            alarm=self.alarm,
            degenerate=decision.degenerate,
        )

    def snapshot(self) -> dict[str, Any]:
        """JSON-serializable copy of the full state."""
        return {
            "version": SNAPSHOT_VERSION,
            "input_dim": self.input_dim,
            "queries_seen": self.queries_seen,
            "distances": list(self.distances),
            "attack": self.attack,
            "alarm": self.alarm,
            "alarm_index": self.alarm_index,
            "blocked": self.blocked,
            "classes": {
                str(label): {
                    "growing_set": group.view().tolist(),
                    "distances": list(self.class_distances[label]),
                    "threshold": self.thresholds[label],
                }
                for label, group in sorted(self._growing.items())
            },
        }

    @classmethod
    def from_snapshot(cls, data: dict[str, Any]) -> "ClientState":
        if data.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"Unsupported client snapshot version {data.get('version')}")
        state = cls()
        state.input_dim = data["input_dim"]
        state.queries_seen = data["queries_seen"]
        state.distances = [float(d) for d in data["distances"]]
        state.attack = data["attack"]
        state.alarm = data["alarm"]
        state.alarm_index = data["alarm_index"]
        state.blocked = data["blocked"]
        for key, entry in data["classes"].items():
            label = int(key)
            rows = np.asarray(entry["growing_set"], dtype=np.float64)
            group = _GrowingSet(rows[0], capacity=max(16, len(rows)))
            for row in rows[1:]:
                group.append(row)
            state._growing[label] = group
            state.class_distances[label] = [float(d) for d in entry["distances"]]
            state.thresholds[label] = float(entry["threshold"])
        return state


def respond(verdict: Verdict, prediction: np.ndarray, policy: ResponsePolicy) -> DefendedResponse:
    """
    Apply the post-detection response policy to a prediction.

    flag passes the prediction through, block denies once the alarm is set, and
    deceive swaps the two most likely classes once the alarm is set.
    """
    probs = np.asarray(prediction, dtype=np.float64)
    if verdict.alarm and policy == ResponsePolicy.BLOCK:
        return DefendedResponse(
            label=None, probabilities=None, denied=True, alarm=True, status=verdict.status
        )
    if verdict.alarm and policy == ResponsePolicy.DECEIVE and len(probs) > 1:
        ranked = np.argsort(-probs, kind="stable")
        probs = probs.copy()
        probs[ranked[0]], probs[ranked[1]] = probs[ranked[1]], probs[ranked[0]]
        label = int(ranked[1])
    else:
        label = int(np.argmax(probs))
    return DefendedResponse(
        label=label, probabilities=probs.tolist(), alarm=verdict.alarm, status=verdict.status
    )


class PradaDetector:
    """Per-client PRADA state keyed by an opaque client id."""

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.clients: dict[str, ClientState] = {}

    def state(self, client_id: str) -> ClientState:
        if client_id not in self.clients:
            logger.debug(f"New client: {client_id}")
            self.clients[client_id] = ClientState()
        return self.clients[client_id]

    def observe(self, client_id: str, x: np.ndarray, label: int) -> Verdict:
        return self.state(client_id).observe(x, label, self.cfg)

    def process(self, client_id: str, x: np.ndarray, probabilities: np.ndarray) -> DefendedResponse:
        """Observe a query and shape the answer according to the response policy."""
        state = self.state(client_id)
        if state.blocked:
            return DefendedResponse(
                label=None, probabilities=None, denied=True, alarm=True, status=VerdictStatus.ATTACK
            )
        label = int(np.argmax(probabilities))
        verdict = state.observe(x, label, self.cfg)
        return respond(verdict, probabilities, self.cfg.response_mode)


def replay_client(
    samples: np.ndarray, labels: Sequence[int] | np.ndarray, cfg: DetectorConfig
) -> tuple[list[Verdict], ClientState]:
    """Replay one client's queries in order (never blocks); returns verdicts and final state."""
    replay_cfg = cfg.model_copy(update={"response_mode": ResponsePolicy.FLAG})
    state = ClientState()
    verdicts = [state.observe(x, int(c), replay_cfg) for x, c in zip(samples, labels, strict=True)]
    return verdicts, state


def replay(samples: np.ndarray, labels: Sequence[int] | np.ndarray, cfg: DetectorConfig) -> list[Verdict]:
    """Verdict sequence of a single client replaying queries in order."""
    return replay_client(samples, labels, cfg)[0]


def replay_w_stream(
    samples: np.ndarray, labels: Sequence[int] | np.ndarray, cfg: DetectorConfig
) -> list[Verdict]:
    """
    Replay with growing sets never frozen, so the W stream does not depend on delta.

    Feed the result to threshold_verdicts to evaluate several thresholds from one pass.
    """
    unfrozen = cfg.model_copy(update={"freeze_on_alarm": False})
    return replay(samples, labels, unfrozen)


def threshold_verdicts(verdicts: Sequence[Verdict], delta: float) -> list[bool]:
    """Per-query attack flags of a delta-independent W stream at threshold delta."""
    flags = []
    for v in verdicts:
        if v.status == VerdictStatus.WARMING_UP or v.current_w is None:
            flags.append(False)
        else:
            flags.append(v.degenerate or v.current_w < delta)
    return flags


def first_alarm(verdicts: Sequence[Verdict]) -> int | None:
    """1-based index of the first attack verdict, if any."""
    for i, v in enumerate(verdicts):
        if v.attack:
            return i + 1
    return None


def replay_distances(d_mins: Sequence[float], cfg: DetectorConfig) -> list[bool | None]:
    """
    Decision at every checkpoint of a raw d_min stream.

    Entry i is None while the first i + 1 distances fill the warm-up window,
    otherwise the attack flag of decide on them.
    """
    values = np.asarray(d_mins, dtype=np.float64)
    out: list[bool | None] = []
    for i in range(len(values)):
        if i + 1 <= cfg.window_min:
            out.append(None)
        else:
            out.append(decide(values[: i + 1], cfg).attack)
    return out
