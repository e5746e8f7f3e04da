"""Billed black-box prediction API around a target network."""

import logging
from typing import TYPE_CHECKING

import numpy as np

from extraction_lab.exceptions import InputShapeError, QueryDeniedError
from extraction_lab.models import ResponseMode
from extraction_lab.neuralnet import Network

if TYPE_CHECKING:
    from extraction_lab.detector import PradaDetector

logger = logging.getLogger(__name__)


class Oracle:
    """
    Prediction API over a confidential target model.

    Features:
    - Counts every answered query exactly once
    - Returns labels only or full probability vectors
    - Optionally routes each query through a PRADA detector as a defended API

    The wrapped network stays reachable as `oracle.network` so the harness can
    score agreement without billing queries.
    """

    def __init__(
        self,
        network: Network,
        response_mode: ResponseMode = ResponseMode.LABELS,
        detector: "PradaDetector | None" = None,
        client_id: str = "attacker",
    ):
        """
        Initialize the prediction API.

        Args:
            network: Target model F
            response_mode: Labels (F-hat) or probabilities (F)
            detector: Detector consulted before answering, if any
            client_id: Identity under which queries are reported to the detector
        """
        self.network = network
        self.response_mode = ResponseMode(response_mode)
        self.detector = detector
        self.client_id = client_id
        self.query_count = 0

    @property
    def input_dim(self) -> int:
        return self.network.input_dim

    @property
    def class_count(self) -> int:
        return self.network.class_count

    def query(self, x: np.ndarray) -> int | np.ndarray:
        """Answer one query: a label, or a probability vector in probabilities mode."""
        sample = np.asarray(x, dtype=np.float64)
        if sample.shape != (self.input_dim,):
            raise InputShapeError(f"Expected a sample of shape ({self.input_dim},), got {sample.shape}")
        return self.query_batch(sample[None, :])[0]

    def query_batch(self, samples: np.ndarray) -> np.ndarray:
        """
        Answer a batch of queries in order.

        Returns:
            Labels of shape (N,) or probabilities of shape (N, m)

        Raises:
            QueryDeniedError: If the detector blocks the client mid-batch; its
                `answered` holds the billed responses before the block
        """
        batch = np.asarray(samples, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise InputShapeError(f"Expected a batch of shape (N, {self.input_dim}), got {batch.shape}")
        if len(batch) == 0:
            return np.empty((0, self.class_count)) if self._soft else np.empty(0, dtype=np.int64)

        probs = self.network.probabilities(batch)
        if self.detector is not None:
            probs = self._defended(batch, probs)

        self.query_count += len(batch)
        return self._format(probs)

    @property
    def _soft(self) -> bool:
        return self.response_mode == ResponseMode.PROBABILITIES

    def _format(self, probs: np.ndarray) -> np.ndarray:
        return probs if self._soft else np.argmax(probs, axis=1)

    def _defended(self, batch: np.ndarray, probs: np.ndarray) -> np.ndarray:
        answered = probs.copy()
        for i, (x, p) in enumerate(zip(batch, probs, strict=True)):
            response = self.detector.process(self.client_id, x, p)
            if response.denied:
                # Bill and hand back the answered prefix only.
                self.query_count += i
                logger.warning(
                    f"Client {self.client_id} blocked after {self.query_count} answered queries"
                )
                raise QueryDeniedError(
                    f"Client {self.client_id} is blocked", answered=self._format(answered[:i])
                )
            answered[i] = response.probabilities
        return answered

    @staticmethod
    def labels_of(responses: np.ndarray) -> np.ndarray:
        """Class labels from either response format."""
        responses = np.asarray(responses)
        return np.argmax(responses, axis=1) if responses.ndim == 2 else responses.astype(np.int64)
