"""
Minimal differentiable feed-forward classifier.

Dense layers with ReLU/identity hidden activations and a softmax output,
cross-entropy against hard labels or probability vectors, SGD with momentum
and Adam, dropout on hidden activations during training, and seeded
initialization. Networks are immutable; training returns a new network.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from extraction_lab.exceptions import EmptyDatasetError, InputShapeError, NumericError
from extraction_lab.models import ARCHITECTURE_PRESETS, Activation, OptimizerKind, TrainingConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FEATURE_RANGE = (-1.0, 1.0)
_RANGE_TOLERANCE = 1e-9
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class Layer:
    """One dense layer: activation(weights @ x + bias)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation


LayerGradient = tuple[np.ndarray, np.ndarray]


class Network:
    """Immutable layered classifier F(x) = softmax(W_k ... relu(W_1 x + b_1) ... + b_k)."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValueError("A network needs at least one layer")

        frozen = []
        for i, layer in enumerate(layers):
            weights = np.array(layer.weights, dtype=np.float64)
            bias = np.array(layer.bias, dtype=np.float64)
            if weights.ndim != 2 or bias.shape != (weights.shape[0],):
                raise InputShapeError(
                    f"Layer {i}: weights {weights.shape} and bias {bias.shape} do not match"
                )
            if i > 0 and weights.shape[1] != frozen[-1].weights.shape[0]:
                raise InputShapeError(
                    f"Layer {i} expects {weights.shape[1]} inputs but layer {i - 1} "
                    f"outputs {frozen[-1].weights.shape[0]}"
                )
            if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
                raise NumericError(f"Layer {i} has non-finite parameters")
            activation = Activation(layer.activation)
            is_last = i == len(layers) - 1
            if is_last and activation != Activation.SOFTMAX:
                raise ValueError("The final layer must use softmax")
            if not is_last and activation == Activation.SOFTMAX:
                raise ValueError(f"Hidden layer {i} cannot use softmax")
            weights.setflags(write=False)
            bias.setflags(write=False)
            frozen.append(Layer(weights, bias, activation))

        self.layers: tuple[Layer, ...] = tuple(frozen)

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weights.shape[1])

    @property
    def class_count(self) -> int:
        return int(self.layers[-1].weights.shape[0])

    @property
    def hidden_sizes(self) -> list[int]:
        return [int(layer.weights.shape[0]) for layer in self.layers[:-1]]

    @property
    def parameter_count(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def probabilities(self, samples: np.ndarray) -> np.ndarray:
        """Softmax outputs for a batch of shape (N, n)."""
        batch = _as_batch(samples, self.input_dim)
        activations, _, _ = _forward_pass(self._params(), batch)
        return activations[-1]

    def predict(self, samples: np.ndarray) -> np.ndarray:
        """Argmax labels for a batch; ties resolve to the lowest class index."""
        return np.argmax(self.probabilities(samples), axis=1)

    def _params(self) -> list[tuple[np.ndarray, np.ndarray, Activation]]:
        return [(layer.weights, layer.bias, layer.activation) for layer in self.layers]

    def __repr__(self) -> str:
        dims = [self.input_dim, *self.hidden_sizes, self.class_count]
        return f"Network(dims={dims}, params={self.parameter_count})"


@dataclass
class Dataset:
    """Samples in [-1, 1]^n with hard labels (N,) or probability targets (N, m)."""

    samples: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.samples.ndim != 2:
            raise InputShapeError(f"Samples must be a 2-D array, got shape {self.samples.shape}")
        if len(self.samples) != len(self.targets):
            raise InputShapeError(
                f"{len(self.samples)} samples but {len(self.targets)} targets"
            )
        lo, hi = FEATURE_RANGE
        if self.samples.size and (
            self.samples.min() < lo - _RANGE_TOLERANCE or self.samples.max() > hi + _RANGE_TOLERANCE
        ):
            raise ValueError("Sample features must lie in [-1, 1]")
        if self.targets.ndim == 2:
            self.targets = self.targets.astype(np.float64)
            if len(self.targets) and not np.allclose(self.targets.sum(axis=1), 1.0, atol=1e-6):
                raise ValueError("Probability targets must each sum to 1")
        elif self.targets.ndim == 1:
            self.targets = self.targets.astype(np.int64)
        else:
            raise InputShapeError("Targets must be 1-D labels or 2-D probabilities")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def input_dim(self) -> int:
        return int(self.samples.shape[1])

    @property
    def is_soft(self) -> bool:
        return self.targets.ndim == 2

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1) if self.is_soft else self.targets

    def subset(self, indices: np.ndarray | Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.targets[idx])

    def target_matrix(self, class_count: int) -> np.ndarray:
        """Targets as an (N, m) matrix of probabilities (one-hot for hard labels)."""
        if self.is_soft:
            if self.targets.shape[1] != class_count:
                raise InputShapeError(
                    f"Probability targets have {self.targets.shape[1]} classes, expected {class_count}"
                )
            return self.targets
        return _one_hot(self.targets, class_count)


def build_network(
    input_dim: int,
    class_count: int,
    hidden: Sequence[int] = (32, 32),
    seed: int = 0,
    hidden_activation: Activation = Activation.RELU,
) -> Network:
    """
    Seeded network with per-layer uniform init in +/- sqrt(6 / (in + out)) and zero biases.

    Args:
        input_dim: Number of input features n
        class_count: Number of classes m
        hidden: Widths of the hidden layers
        seed: Seed for the weight generator
        hidden_activation: Activation of every hidden layer

    Returns:
        Freshly initialized Network
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, class_count]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:], strict=True)):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = Activation.SOFTMAX if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(weights, np.zeros(fan_out), activation))
    return Network(layers)


def build_like(template: Network, seed: int) -> Network:
    """Fresh random weights with the same architecture as `template`."""
    hidden_activation = template.layers[0].activation if len(template.layers) > 1 else Activation.RELU
    return build_network(
        template.input_dim, template.class_count, template.hidden_sizes, seed, hidden_activation
    )


def build_preset(
    preset: str, input_dim: int, class_count: int, width: int = 32, seed: int = 0
) -> Network:
    """Fully-connected preset `fc1`..`fc4`: that many hidden layers of equal width."""
    if preset not in ARCHITECTURE_PRESETS:
        raise ValueError(f"Unknown architecture preset {preset!r}")
    return build_network(input_dim, class_count, [width] * ARCHITECTURE_PRESETS[preset], seed)


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Probability vector F(x) for a single sample."""
    return net.probabilities(_as_sample(x, net.input_dim)[None, :])[0]


def predict_label(net: Network, x: np.ndarray) -> int:
    """argmax F(x), ties broken by the lowest class index."""
    return int(np.argmax(forward(net, x)))


def param_gradients(net: Network, batch: Dataset) -> list[LayerGradient]:
    """
    Mean cross-entropy gradient over a batch for every layer.

    Returns:
        List of (d weights, d bias) in layer order
    """
    if len(batch) == 0:
        raise EmptyDatasetError("Cannot compute gradients of an empty batch")
    samples = _as_batch(batch.samples, net.input_dim)
    targets = batch.target_matrix(net.class_count)
    activations, pre, masks = _forward_pass(net._params(), samples)
    delta = (activations[-1] - targets) / len(samples)
    grads, _ = _backward_pass(net._params(), activations, pre, masks, delta)
    return grads


def input_gradient(net: Network, x: np.ndarray, c: int) -> np.ndarray:
    """Gradient of L(F(x), c) with respect to the input x."""
    sample = _as_sample(x, net.input_dim)
    return input_gradient_batch(net, sample[None, :], np.array([c]))[0]


def input_gradient_batch(net: Network, samples: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Per-sample input gradients of L(F(x_i), c_i), shape (N, n)."""
    batch = _as_batch(samples, net.input_dim)
    classes = np.asarray(classes, dtype=np.int64)
    if classes.shape != (len(batch),):
        raise InputShapeError(f"Expected {len(batch)} class indices, got shape {classes.shape}")
    activations, pre, masks = _forward_pass(net._params(), batch)
    delta = activations[-1] - _one_hot(classes, net.class_count)
    _, grad_input = _backward_pass(net._params(), activations, pre, masks, delta)
    return grad_input


def cross_entropy(net: Network, data: Dataset) -> float:
    """Mean cross-entropy -sum(y log p) over a dataset."""
    probs = net.probabilities(data.samples)
    return _cross_entropy(probs, data.target_matrix(net.class_count))


def accuracy(net: Network, data: Dataset) -> float:
    """Fraction of samples whose predicted label equals the dataset label."""
    if len(data) == 0:
        raise EmptyDatasetError("Cannot compute accuracy on an empty dataset")
    return float(np.mean(net.predict(data.samples) == data.labels))


def train(net: Network, data: Dataset, cfg: TrainingConfig) -> Network:
    """
    Train a copy of `net` with minibatch cross-entropy.

    Shuffling and dropout masks come from a generator seeded by cfg.seed, so equal
    inputs give bit-identical weights.

    Args:
        net: Starting network (left untouched)
        data: Training data with hard labels or probability targets
        cfg: Optimizer, learning rate, epochs, batch size, dropout and seed

    Returns:
        The trained network

    Raises:
        EmptyDatasetError: If data has no samples
        NumericError: If the loss becomes non-finite (carries the epoch index)
    """
    if len(data) == 0:
        raise EmptyDatasetError("Cannot train on an empty dataset")
    samples = _as_batch(data.samples, net.input_dim)
    targets = data.target_matrix(net.class_count)
    if cfg.epochs == 0:
        return net

    # Work on copies; the caller's network is never mutated
    params = [(w.copy(), b.copy(), act) for w, b, act in net._params()]
    rng = np.random.default_rng(cfg.seed)
    optimizer = _Optimizer(cfg, params)
    n_samples = len(samples)
    loss = float("nan")

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            activations, pre, masks = _forward_pass(
                params, samples[idx], dropout_rate=cfg.dropout_rate, rng=rng, epoch=epoch
            )
            probs = activations[-1]
            total += _cross_entropy(probs, targets[idx]) * len(idx)
            # Softmax plus cross-entropy: d loss / d logits is p - y
            delta = (probs - targets[idx]) / len(idx)
            grads, _ = _backward_pass(params, activations, pre, masks, delta)
            optimizer.step(params, grads)

        loss = total / n_samples
        if not np.isfinite(loss):
            raise NumericError("Training loss is not finite", epoch=epoch)

    logger.debug(
        f"Trained {len(params)}-layer net: {cfg.optimizer.value}, lr={cfg.learning_rate:g}, "
        f"epochs={cfg.epochs}, n={n_samples}, final loss={loss:.4f}"
    )
    return Network([Layer(w, b, act) for w, b, act in params])


def save_network(net: Network, path: Path) -> None:
    """Write a network to a versioned .npz file (bit-exact round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array(FORMAT_VERSION),
        "activations": np.array([layer.activation.value for layer in net.layers]),
        "dims": np.array([net.input_dim, *net.hidden_sizes, net.class_count]),
    }
    for i, layer in enumerate(net.layers):
        arrays[f"W{i}"] = np.ascontiguousarray(layer.weights)
        arrays[f"b{i}"] = np.ascontiguousarray(layer.bias)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug(f"Network saved: {path} {net!r}")


def load_network(path: Path) -> Network:
    """Read a network written by save_network."""
    with np.load(Path(path), allow_pickle=False) as archive:
        version = int(archive["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"Unsupported network format version {version}")
        activations = [Activation(str(tag)) for tag in archive["activations"]]
        layers = [
            Layer(archive[f"W{i}"].copy(), archive[f"b{i}"].copy(), act)
            for i, act in enumerate(activations)
        ]
    net = Network(layers)
    logger.debug(f"Network loaded: {path} {net!r}")
    return net


class _Optimizer:
    """In-place parameter updates for SGD with momentum or Adam."""

    def __init__(self, cfg: TrainingConfig, params: list[tuple[np.ndarray, np.ndarray, Activation]]):
        self.cfg = cfg
        self.t = 0
        self.first = [(np.zeros_like(w), np.zeros_like(b)) for w, b, _ in params]
        self.second = [(np.zeros_like(w), np.zeros_like(b)) for w, b, _ in params]

    def step(
        self, params: list[tuple[np.ndarray, np.ndarray, Activation]], grads: list[LayerGradient]
    ) -> None:
        cfg = self.cfg
        self.t += 1
        for (w, b, _), (gw, gb), m, v in zip(params, grads, self.first, self.second, strict=True):
            for p, g, m_i, v_i in ((w, gw, m[0], v[0]), (b, gb, m[1], v[1])):
                # Updates are in place on the copied parameters
                if cfg.optimizer == OptimizerKind.SGD_MOMENTUM:
                    m_i *= cfg.momentum
                    m_i -= cfg.learning_rate * g
                    p += m_i
                else:
                    m_i *= cfg.beta1
                    m_i += (1 - cfg.beta1) * g
                    v_i *= cfg.beta2
                    v_i += (1 - cfg.beta2) * g * g
                    # Bias correction
                    m_hat = m_i / (1 - cfg.beta1**self.t)
                    v_hat = v_i / (1 - cfg.beta2**self.t)
                    p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _forward_pass(
    params: Sequence[tuple[np.ndarray, np.ndarray, Activation]],
    samples: np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    epoch: int | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray | None]]:
    activations = [samples]
    pre: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    current = samples
    for i, (weights, bias, activation) in enumerate(params):
        z = current @ weights.T + bias
        if activation == Activation.SOFTMAX:
            current = _softmax(z)
        elif activation == Activation.RELU:
            current = np.maximum(z, 0.0)
        else:
            current = z
        mask = None
        if dropout_rate > 0 and rng is not None and i < len(params) - 1:
            # Inverted dropout on hidden layers only; no rescaling at inference
            mask = (rng.random(current.shape) >= dropout_rate) / (1.0 - dropout_rate)
            current = current * mask
        pre.append(z)
        masks.append(mask)
        activations.append(current)
    if not np.all(np.isfinite(current)):
        raise NumericError("Forward pass produced non-finite activations", epoch=epoch)
    return activations, pre, masks


def _backward_pass(
    params: Sequence[tuple[np.ndarray, np.ndarray, Activation]],
    activations: list[np.ndarray],
    pre: list[np.ndarray],
    masks: list[np.ndarray | None],
    delta: np.ndarray,
) -> tuple[list[LayerGradient], np.ndarray]:
    """Backpropagate d loss / d logits of the softmax layer."""
    grads: list[LayerGradient] = []
    for i in range(len(params) - 1, -1, -1):
        weights = params[i][0]
        grads.append((delta.T @ activations[i], delta.sum(axis=0)))
        upstream = delta @ weights
        if i == 0:
            break
        if masks[i - 1] is not None:
            upstream = upstream * masks[i - 1]
        # ReLU passes gradient only where its input was positive
        if params[i - 1][2] == Activation.RELU:
            upstream = upstream * (pre[i - 1] > 0)
        delta = upstream
    grads.reverse()
    return grads, upstream


def _softmax(z: np.ndarray) -> np.ndarray:
    # Max shift for overflow safety
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(-np.sum(targets * np.log(np.maximum(probs, _LOG_FLOOR))) / len(probs))


def _one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"Labels must lie in [0, {class_count})")
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _as_sample(x: np.ndarray, input_dim: int) -> np.ndarray:
    sample = np.asarray(x, dtype=np.float64)
    if sample.shape != (input_dim,):
        raise InputShapeError(f"Expected a sample of shape ({input_dim},), got {sample.shape}")
    return sample


def _as_batch(samples: np.ndarray, input_dim: int) -> np.ndarray:
    batch = np.asarray(samples, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != input_dim:
        raise InputShapeError(f"Expected a batch of shape (N, {input_dim}), got {batch.shape}")
    return batch
