"""
Cross-validated hyperparameter search driven by Gaussian-process Bayesian optimization.

The search box is (learning rate, epochs), both on a log scale and normalized
to the unit square. Four corners and eleven random points seed a GP whose
mean + std acquisition picks the remaining fifteen evaluations.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.metrics import accuracy_score
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from extraction_lab.exceptions import (
    EmptyDatasetError,
    FoldTrainingError,
    GPFitError,
    NumericError,
    SearchFailedError,
)
from extraction_lab.models import HyperRange, OptimizerKind, SearchRecord, TrainingConfig
from extraction_lab.neuralnet import Dataset, Network, build_like, train

logger = logging.getLogger(__name__)

FOLD_COUNT = 5
CORNER_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
RANDOM_EVALUATIONS = 11
GP_EVALUATIONS = 15
CV_DROPOUT = 0.1

LENGTH_SCALE = 0.5
NOISE_VARIANCE = 1e-4
MIN_SIGNAL_VARIANCE = 1e-3
JITTER = 1e-8
KAPPA = 1.0
GRID_SIDE = 32


@dataclass(frozen=True)
class Fold:
    """One cross-validation split."""

    train: Dataset
    validation: Dataset
    validation_index: np.ndarray


def kfolds(data: Dataset, k: int = FOLD_COUNT, rng: np.random.Generator | None = None) -> list[Fold]:
    """
    Split a dataset into k train/validation folds.

    Samples are shuffled and dealt round-robin, so validation sizes differ by at
    most one. When every class has at least k members the deal runs class by
    class, which also balances each class across folds within one.

    Raises:
        ValueError: If the dataset has fewer than k samples
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if len(data) < k:
        raise ValueError(f"Cannot make {k} folds from {len(data)} samples")
    rng = rng or np.random.default_rng(0)

    labels = data.labels
    counts = np.bincount(labels)
    # Class-major deal keeps per-class counts balanced across folds
    if np.all(counts[counts > 0] >= k):
        order = np.concatenate(
            [rng.permutation(np.flatnonzero(labels == c)) for c in np.flatnonzero(counts)]
        )
    else:
        order = rng.permutation(len(data))

    # Round-robin: position i in the order goes to fold i mod k
    assignment = np.empty(len(data), dtype=np.int64)
    assignment[order] = np.arange(len(data)) % k

    folds = []
    for i in range(k):
        val_idx = np.flatnonzero(assignment == i)
        train_idx = np.flatnonzero(assignment != i)
        folds.append(Fold(data.subset(train_idx), data.subset(val_idx), val_idx))
    return folds


def cv_fold_accuracies(
    hyper: TrainingConfig,
    folds: Sequence[Fold],
    template: Network,
    factory: Callable[[int], Network] | None = None,
) -> list[float]:
    """
    Validation accuracy of a fresh network trained on each fold.

    Args:
        hyper: Training hyperparameters; fold i trains with seed hyper.seed + i
        folds: Splits from kfolds
        template: Architecture to re-initialize for every fold
        factory: Builds the starting network for fold i (defaults to fresh template weights)

    Raises:
        FoldTrainingError: If training fails in a fold (carries the fold index)
    """
    if not folds:
        raise EmptyDatasetError("Cross-validation needs at least one fold")
    make = factory or (lambda i: build_like(template, hyper.seed + i))

    scores = []
    for i, fold in enumerate(folds):
        fold_cfg = hyper.model_copy(update={"seed": hyper.seed + i})
        try:
            net = train(make(i), fold.train, fold_cfg)
        except (NumericError, EmptyDatasetError) as e:
            raise FoldTrainingError(i, e) from e
        predicted = net.predict(fold.validation.samples)
        scores.append(float(accuracy_score(fold.validation.labels, predicted)))
    return scores


def cv_accuracy(
    hyper: TrainingConfig,
    folds: Sequence[Fold],
    template: Network,
    factory: Callable[[int], Network] | None = None,
) -> float:
    """Mean of cv_fold_accuracies."""
    return float(np.mean(cv_fold_accuracies(hyper, folds, template, factory)))


@dataclass
class GPModel:
    """Exact GP regression posterior with an RBF kernel."""

    points: np.ndarray
    values: np.ndarray
    length_scales: np.ndarray
    signal_variance: float
    noise: float
    prior_mean: float
    factor: tuple[np.ndarray, bool]
    alpha: np.ndarray


def rbf_kernel(
    a: np.ndarray, b: np.ndarray, length_scales: np.ndarray, signal_variance: float
) -> np.ndarray:
    """k(a, b) = s^2 exp(-0.5 * sum(((a - b) / l)^2))."""
    diff = (a[:, None, :] - b[None, :, :]) / length_scales
    return signal_variance * np.exp(-0.5 * np.sum(diff * diff, axis=2))


def gp_fit(
    points: np.ndarray,
    values: np.ndarray,
    length_scales: float | Sequence[float] = LENGTH_SCALE,
    signal_variance: float | None = None,
    noise: float = NOISE_VARIANCE,
    prior_mean: float | None = None,
) -> GPModel:
    """
    Fit an exact GP posterior to observations.

    Signal variance defaults to the variance of the observed values (floored at
    1e-3) and the prior mean to their mean. The kernel matrix is factorized by
    Cholesky; on failure it is retried once with 1e-8 jitter.

    Raises:
        ValueError: If there are no observations or noise is not positive
        GPFitError: If the factorization fails even with jitter
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0 or len(points) != len(values):
        raise ValueError("gp_fit needs at least one observation per point")
    if noise <= 0:
        raise ValueError("Noise variance must be positive")

    scales = np.broadcast_to(np.asarray(length_scales, dtype=np.float64), (points.shape[1],)).copy()
    variance = (
        float(signal_variance)
        if signal_variance is not None
        else max(float(np.var(values)), MIN_SIGNAL_VARIANCE)
    )
    mean = float(np.mean(values)) if prior_mean is None else float(prior_mean)

    # Noise on the diagonal; observations are not interpolated exactly
    kernel = rbf_kernel(points, points, scales, variance) + noise * np.eye(len(points))
    factor = _factorize(kernel)
    alpha = cho_solve(factor, values - mean)
    return GPModel(points, values, scales, variance, noise, mean, factor, alpha)


def gp_predict(model: GPModel, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (latent) standard deviation at one point or a batch."""
    query = np.asarray(query, dtype=np.float64)
    single = query.ndim == 1
    batch = np.atleast_2d(query)
    cross = rbf_kernel(batch, model.points, model.length_scales, model.signal_variance)
    mean = model.prior_mean + cross @ model.alpha
    solved = cho_solve(model.factor, cross.T)
    variance = model.signal_variance - np.sum(cross.T * solved, axis=0)
    std = np.sqrt(np.maximum(variance, 0.0))
    if single:
        return mean[0], std[0]
    return mean, std


def candidate_grid(rng: np.random.Generator, side: int = GRID_SIDE) -> np.ndarray:
    """Seeded, randomly shifted side x side lattice over the unit square."""
    offset = rng.uniform(0.0, 1.0 / side, size=2)
    axis = np.arange(side) / side
    u, v = np.meshgrid(axis + offset[0], axis + offset[1], indexing="ij")
    return np.column_stack([u.ravel(), v.ravel()])


def acquire_next(
    model: GPModel, search_range: HyperRange, rng: np.random.Generator
) -> tuple[float, int]:
    """
    Hyperparameters maximizing mean + std over a seeded candidate grid.

    The grid lives in normalized log coordinates; the winner is mapped back into
    `search_range` as (learning rate, integer epochs).
    """
    grid = candidate_grid(rng)
    mean, std = gp_predict(model, grid)
    return denormalize(grid[int(np.argmax(mean + KAPPA * std))], search_range)


def normalize(learning_rate: float, epochs: float, search_range: HyperRange) -> np.ndarray:
    """Map (learning rate, epochs) into normalized log coordinates."""
    out = []
    for value, (lo, hi) in ((learning_rate, search_range.lr_bounds), (epochs, search_range.epoch_bounds)):
        out.append((np.log(value) - np.log(lo)) / (np.log(hi) - np.log(lo)))
    return np.array(out)


def denormalize(point: np.ndarray, search_range: HyperRange) -> tuple[float, int]:
    """Map a normalized point back to (learning rate, integer epochs) inside the box."""
    u = np.clip(np.asarray(point, dtype=np.float64), 0.0, 1.0)
    lr_lo, lr_hi = search_range.lr_bounds
    ep_lo, ep_hi = search_range.epoch_bounds
    learning_rate = float(np.exp(np.log(lr_lo) + u[0] * (np.log(lr_hi) - np.log(lr_lo))))
    epochs = float(np.exp(np.log(ep_lo) + u[1] * (np.log(ep_hi) - np.log(ep_lo))))
    epochs_int = int(np.clip(round(epochs), np.ceil(ep_lo), np.floor(ep_hi)))
    return learning_rate, epochs_int


@dataclass
class SearchResult:
    """Winner of a CV-search plus its full evaluation trace."""

    best: TrainingConfig
    best_record: SearchRecord
    trace: list[SearchRecord] = field(default_factory=list)


def run_cv_search(
    data: Dataset,
    search_range: HyperRange,
    template: Network,
    rng: np.random.Generator,
    evaluate: Callable[[TrainingConfig], float | list[float]] | None = None,
) -> SearchResult:
    """
    Thirty-evaluation CV-search over (learning rate, epochs).

    Args:
        data: Labeled data to cross-validate on (at least five samples)
        search_range: Box over learning rate and epochs
        template: Substitute architecture
        rng: Drives the folds, the random phase and the candidate grids
        evaluate: Scores a TrainingConfig (a mean or per-fold accuracies); defaults to
            five-fold cv_fold_accuracies

    Returns:
        SearchResult; ties on mean accuracy go to the earliest evaluation

    Raises:
        SearchFailedError: If every evaluation failed
    """
    if evaluate is None:
        folds = kfolds(data, FOLD_COUNT, rng)
        scorer: Callable[[TrainingConfig], float | list[float]] = lambda cfg: cv_fold_accuracies(
            cfg, folds, template
        )
    else:
        scorer = evaluate

    base_seed = int(rng.integers(0, 2**31 - 1))
    points: list[np.ndarray] = []
    values: list[float] = []
    trace: list[SearchRecord] = []

    def run(point: np.ndarray, phase: str) -> None:
        learning_rate, epochs = denormalize(point, search_range)
        cfg = TrainingConfig(
            optimizer=OptimizerKind.ADAM,
            learning_rate=learning_rate,
            epochs=epochs,
            dropout_rate=CV_DROPOUT,
            seed=base_seed,
        )
        record = SearchRecord(index=len(trace), phase=phase, learning_rate=learning_rate, epochs=epochs)
        try:
            outcome = scorer(cfg)
        except (FoldTrainingError, NumericError) as e:
            logger.warning(
                f"CV evaluation {record.index} (lr={learning_rate:.2e}, epochs={epochs}) failed: {e}"
            )
            record.failed = True
        else:
            if np.ndim(outcome) == 0:
                score = float(outcome)
            else:
                record.fold_accuracies = [float(a) for a in outcome]
                score = float(np.mean(record.fold_accuracies))
            record.mean_accuracy = score
            points.append(np.asarray(point, dtype=np.float64))
            values.append(score)
            logger.debug(
                f"CV evaluation {record.index} [{phase}] lr={learning_rate:.2e} "
                f"epochs={epochs} acc={score:.4f}"
            )
        trace.append(record)

    # Box corners, then random points, then GP-guided points
    for corner in CORNER_POINTS:
        run(corner, "corner")
    for point in rng.uniform(0.0, 1.0, size=(RANDOM_EVALUATIONS, 2)):
        run(point, "random")
    for _ in range(GP_EVALUATIONS):
        if values:
            model = gp_fit(np.array(points), np.array(values))
            learning_rate, epochs = acquire_next(model, search_range, rng)
            # Fit the GP where the rounded hyperparameters were actually evaluated.
            point = normalize(learning_rate, epochs, search_range)
        else:
            point = rng.uniform(0.0, 1.0, size=2)
        run(point, "gp")

    if not values:
        raise SearchFailedError(f"All {len(trace)} CV-search evaluations failed")

    # argmax keeps the earliest of equal means
    ok = [r for r in trace if not r.failed]
    best_record = ok[int(np.argmax([r.mean_accuracy for r in ok]))]
    best = TrainingConfig(
        optimizer=OptimizerKind.ADAM,
        learning_rate=best_record.learning_rate,
        epochs=best_record.epochs,
        dropout_rate=CV_DROPOUT,
        seed=base_seed,
    )
    logger.info(
        f"CV-search best: lr={best.learning_rate:.2e}, epochs={best.epochs}, "
        f"accuracy={best_record.mean_accuracy:.4f} ({len(ok)}/{len(trace)} evaluations ok)"
    )
    return SearchResult(best=best, best_record=best_record, trace=trace)


def cv_search(
    data: Dataset, search_range: HyperRange, template: Network, rng: np.random.Generator
) -> TrainingConfig:
    """Best TrainingConfig found by run_cv_search."""
    return run_cv_search(data, search_range, template, rng).best


def _factorize(kernel: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(2),
            retry=retry_if_exception_type(LinAlgError),
            reraise=True,
        ):
            with attempt:
                jitter = 0.0 if attempt.retry_state.attempt_number == 1 else JITTER
                if jitter:
                    logger.debug(f"Retrying GP factorization with jitter {jitter:g}")
                return cho_factor(kernel + jitter * np.eye(len(kernel)), lower=True)
    except LinAlgError as e:
        raise GPFitError(f"Kernel matrix is not positive definite: {e}") from e
    raise GPFitError("Kernel matrix factorization did not run")
