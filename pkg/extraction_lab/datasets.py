"""Desk-scale datasets, seed selection and benign client streams."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from scipy.stats import chi
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

from extraction_lab.exceptions import DatasetFormatError, EmptyDatasetError
from extraction_lab.models import BenignStreamSpec, StreamMode
from extraction_lab.neuralnet import Dataset

logger = logging.getLogger(__name__)

# Blob samples are kept within this fraction of the margin from their centroid,
# which leaves a gap of at least 0.1 * margin between neighbouring blobs.
BLOB_RADIUS_FRACTION = 0.45
MIN_ACCEPTANCE = 1e-3


@dataclass(frozen=True)
class BlobGenerator:
    """
    Sampler for truncated unit-spread Gaussian blobs, in feature space.

    Every draw is fresh, so it serves as an unbounded source of natural samples
    for benign clients.
    """

    centroids: np.ndarray
    radius: float
    scale: float

    @property
    def input_dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def class_count(self) -> int:
        return len(self.centroids)

    def sample_class(self, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """`count` samples of one class by rejection outside the truncation radius."""
        dim = self.input_dim
        accepted = np.empty((0, dim))
        while len(accepted) < count:
            need = count - len(accepted)
            draws = rng.normal(size=(max(2 * need, 16), dim))
            draws = draws[np.linalg.norm(draws, axis=1) < self.radius]
            accepted = np.concatenate([accepted, draws[:need]])
        return np.clip((self.centroids[label] + accepted) / self.scale, -1.0, 1.0)

    def sample(self, per_class: int, rng: np.random.Generator) -> Dataset:
        """Labeled dataset in class-major order."""
        samples = [self.sample_class(c, per_class, rng) for c in range(self.class_count)]
        labels = np.repeat(np.arange(self.class_count), per_class)
        return Dataset(np.concatenate(samples), labels)

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Unlabeled samples with classes drawn uniformly, in draw order."""
        labels = rng.integers(0, self.class_count, size=count)
        out = np.empty((count, self.input_dim))
        for c in range(self.class_count):
            slots = np.flatnonzero(labels == c)
            if len(slots):
                out[slots] = self.sample_class(c, len(slots), rng)
        return out


def blob_generator(classes: int = 3, dim: int = 2, margin: float = 6.0) -> BlobGenerator:
    """
    Blob layout with neighbouring centroids `margin` standard deviations apart.

    Centroids sit on a circle in the first two features (a line for dim = 1).
    Samples are kept within 0.45 * margin of their centroid, so the blobs are
    linearly separable, and features are scaled into [-1, 1].

    Raises:
        ValueError: If the truncation radius is infeasible for the dimension
    """
    if classes < 2 or dim < 1:
        raise ValueError("blob_generator needs classes >= 2 and dim >= 1")
    radius = BLOB_RADIUS_FRACTION * margin
    acceptance = float(chi.cdf(radius, dim))
    if acceptance < MIN_ACCEPTANCE:
        raise ValueError(
            f"margin {margin} is infeasible in {dim} dimensions "
            f"(acceptance rate {acceptance:.2e} for unit-spread blobs)"
        )

    centroids = np.zeros((classes, dim))
    if dim == 1:
        centroids[:, 0] = (np.arange(classes) - (classes - 1) / 2) * margin
        extent = (classes - 1) / 2 * margin
    else:
        circle = margin / (2 * math.sin(math.pi / classes))
        angles = 2 * math.pi * np.arange(classes) / classes
        centroids[:, 0] = circle * np.cos(angles)
        centroids[:, 1] = circle * np.sin(angles)
        extent = circle
    return BlobGenerator(centroids=centroids, radius=radius, scale=extent + radius)


def gen_blobs_dataset(
    classes: int = 3,
    dim: int = 2,
    per_class: int = 100,
    margin: float = 6.0,
    rng: np.random.Generator | None = None,
) -> Dataset:
    """
    Gaussian blobs with unit spread, separated by `margin` standard deviations.

    Args:
        classes: Number of classes
        dim: Number of features
        per_class: Samples per class
        margin: Centroid separation in units of the blob spread
        rng: Random generator (seeded default if None)

    Returns:
        Dataset in class-major order, features in [-1, 1]

    Raises:
        ValueError: If the truncation radius is infeasible for the dimension
    """
    if per_class < 1:
        raise ValueError("gen_blobs_dataset needs per_class >= 1")
    generator = blob_generator(classes, dim, margin)
    data = generator.sample(per_class, rng or np.random.default_rng(0))
    logger.debug(f"Generated {classes} blobs x {per_class} in {dim}-D, margin={margin}")
    return data


def load_digits_dataset() -> Dataset:
    """8x8 16-level handwritten digits, features rescaled from [0, 16] to [-1, 1]."""
    digits = load_digits()
    return Dataset(digits.data / 8.0 - 1.0, digits.target)


def load_csv_dataset(path: Path, rescale: bool = True) -> Dataset:
    """
    Load rows of `label,f1,...,fn` without a header.

    Args:
        path: CSV file
        rescale: Map features linearly to [-1, 1] using the file's min and max

    Returns:
        Dataset with labels re-indexed densely from 0 (in sorted order)

    Raises:
        FileNotFoundError: If the file doesn't exist
        DatasetFormatError: On an empty file, ragged rows or non-numeric cells
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, header=None)
    except pd.errors.EmptyDataError as e:
        raise DatasetFormatError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise DatasetFormatError(f"{path} has ragged rows: {e}") from e

    if frame.shape[1] < 2 or len(frame) == 0:
        raise DatasetFormatError(f"{path} needs a label and at least one feature per row")
    values = frame.apply(pd.to_numeric, errors="coerce")
    if values.isna().to_numpy().any():
        bad_rows = sorted({int(i) for i in np.flatnonzero(values.isna().any(axis=1).to_numpy())})
        raise DatasetFormatError(f"{path} has missing or non-numeric cells in rows {bad_rows[:10]}")

    raw_labels = values.iloc[:, 0].to_numpy()
    if not np.all(raw_labels == np.round(raw_labels)):
        raise DatasetFormatError(f"{path} has non-integer labels")
    _, labels = np.unique(raw_labels.astype(np.int64), return_inverse=True)

    features = values.iloc[:, 1:].to_numpy(dtype=np.float64)
    if rescale:
        lo, hi = features.min(), features.max()
        if hi > lo:
            features = 2.0 * (features - lo) / (hi - lo) - 1.0
        else:
            features = np.zeros_like(features)

    logger.info(f"Loaded {len(features)} samples with {features.shape[1]} features from {path}")
    return Dataset(features, labels)


def export_csv_dataset(data: Dataset, path: Path) -> None:
    """Write a hard-labeled dataset as `label,f1,...,fn` rows."""
    if data.is_soft:
        raise ValueError("Only hard-labeled datasets can be exported")
    frame = pd.DataFrame(data.samples)
    frame.insert(0, "label", data.labels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, header=False, index=False, float_format="%.17g")
    logger.debug(f"Dataset written: {path} ({len(data)} rows)")


def select_seeds(data: Dataset, per_class: int, rng: np.random.Generator) -> Dataset:
    """Draw `per_class` samples of every class without replacement, class-major."""
    chosen = []
    for label in np.unique(data.labels):
        members = np.flatnonzero(data.labels == label)
        if len(members) < per_class:
            raise ValueError(f"Class {label} has {len(members)} samples, need {per_class} seeds")
        # Sorted within a class so seeds keep dataset order
        chosen.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    return data.subset(np.concatenate(chosen))


@dataclass
class DataSplits:
    """Disjoint partitions used by one experiment."""

    target_train: Dataset
    attacker_pool: Dataset
    test: Dataset


def split_dataset(
    data: Dataset, test_fraction: float, attacker_fraction: float, seed: int
) -> DataSplits:
    """Stratified test split, then a stratified attacker pool from the remainder."""
    idx = np.arange(len(data))
    rest, test = train_test_split(
        idx, test_size=test_fraction, stratify=data.labels, random_state=seed
    )
    # attacker_fraction applies to what the test split left
    target, attacker = train_test_split(
        rest, test_size=attacker_fraction, stratify=data.labels[rest], random_state=seed
    )
    return DataSplits(data.subset(target), data.subset(attacker), data.subset(test))


class SampleGenerator(Protocol):
    """Unbounded source of natural samples, such as BlobGenerator."""

    @property
    def input_dim(self) -> int: ...

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray: ...


def natural_draws(
    source: "Dataset | SampleGenerator", count: int, rng: np.random.Generator
) -> np.ndarray:
    """
    `count` natural samples from a generator or a finite pool.

    A pool is consumed in shuffled passes, so no sample repeats before the whole
    pool has been used once.
    """
    if not isinstance(source, Dataset):
        return source.draw(count, rng)
    passes = math.ceil(count / len(source))
    if passes > 1:
        # Exact repeats give d_min = 0 and skew the detector's distance stream.
        logger.warning(
            f"{count} natural queries exceed the pool of {len(source)} samples; "
            f"samples repeat after the first pass"
        )
    order = np.concatenate([rng.permutation(len(source)) for _ in range(passes)])
    return source.samples[order[:count]]


def benign_stream(
    spec: BenignStreamSpec, source: "Dataset | SampleGenerator | None" = None
) -> np.ndarray:
    """
    Ordered queries of a simulated benign client.

    iid_natural draws natural samples (fresh from a generator, or a pool without
    repeats until it is exhausted), random_uniform draws uniformly from [-1, 1]^n
    and sequences emits runs of `sequence_length` noisy variants of one natural
    sample. Within a run the noise decays linearly from noise_scale to
    noise_floor * noise_scale.

    Raises:
        EmptyDatasetError: If a natural mode has no source samples
    """
    rng = np.random.default_rng(spec.seed)
    mode = StreamMode(spec.mode)

    if mode == StreamMode.RANDOM_UNIFORM:
        dim = spec.input_dim or (source.input_dim if source is not None else None)
        if dim is None:
            raise ValueError("random_uniform streams need input_dim or a source dataset")
        return rng.uniform(-1.0, 1.0, size=(spec.length, dim))

    if source is None or (isinstance(source, Dataset) and len(source) == 0):
        raise EmptyDatasetError(f"{mode.value} streams need a non-empty source")

    if mode == StreamMode.IID_NATURAL:
        return natural_draws(source, spec.length, rng)

    length = spec.sequence_length
    runs = math.ceil(spec.length / length)
    bases = natural_draws(source, runs, rng)
    # Linear decay that stops at the floor; no run collapses onto its base sample.
    progress = np.arange(length) / max(length - 1, 1)
    decay = spec.noise_scale * (1.0 - (1.0 - spec.noise_floor) * progress)
    blocks = []
    for base in bases:
        noise = rng.normal(size=(length, len(base))) * decay[:, None]
        blocks.append(np.clip(base + noise, -1.0, 1.0))
    return np.concatenate(blocks)[: spec.length]
