"""
Adversarial example crafting under an L-infinity budget.

FGSM, I-FGSM and MI-FGSM, each targeted or non-targeted. Used to measure
transferability and, through the extraction module, to grow synthetic query sets.
"""

import logging

import numpy as np

from extraction_lab.exceptions import InputShapeError
from extraction_lab.models import CraftMethod, CraftMode, CraftSpec
from extraction_lab.neuralnet import Network, input_gradient_batch, predict_label

logger = logging.getLogger(__name__)


def craft_batch(net: Network, samples: np.ndarray, spec: CraftSpec, classes: np.ndarray) -> np.ndarray:
    """
    Craft a batch of adversarial examples.

    For non-targeted mode `classes` are the labels whose loss is ascended; for
    targeted mode they are the targets whose loss is descended.

    Args:
        net: White-box network supplying input gradients
        samples: Batch of shape (N, n) inside the clip range
        spec: Method, mode, epsilon, steps and momentum decay
        classes: One class index per sample

    Returns:
        Crafted batch with ||x' - x||_inf <= epsilon, clipped to spec.clip_range
    """
    origin = np.asarray(samples, dtype=np.float64)
    if origin.ndim != 2:
        raise InputShapeError(f"Expected a batch of shape (N, n), got {origin.shape}")
    classes = np.asarray(classes, dtype=np.int64)
    lo, hi = spec.clip_range
    sign = -1.0 if spec.mode == CraftMode.TARGETED else 1.0
    step = spec.step_size

    current = origin.copy()
    velocity = np.zeros_like(origin)
    for _ in range(spec.steps or 1):
        grad = input_gradient_batch(net, current, classes)
        if spec.method == CraftMethod.MIFGSM:
            norms = np.abs(grad).sum(axis=1, keepdims=True)
            # zero-gradient rows keep their accumulated momentum unchanged
            normalized = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
            velocity = spec.momentum_decay * velocity + normalized
            direction = np.sign(velocity)
        else:
            direction = np.sign(grad)
        current = current + sign * step * direction
        current = np.clip(current, origin - spec.epsilon, origin + spec.epsilon)
        current = np.clip(current, lo, hi)
    return current


def craft(net: Network, x: np.ndarray, spec: CraftSpec, target: int | None = None) -> np.ndarray:
    """
    Craft one adversarial example.

    Raises:
        ValueError: If targeted mode gets no target, an unknown class or the
            class x is already predicted as
    """
    if spec.mode == CraftMode.TARGETED:
        if target is None:
            raise ValueError("Targeted crafting requires a target class")
        if not 0 <= target < net.class_count:
            raise ValueError(f"Target class {target} is outside 0..{net.class_count - 1}")
        if target == predict_label(net, x):
            raise ValueError(f"x is already predicted as the target class {target}")
        cls = target
    else:
        cls = predict_label(net, x)
    return craft_batch(net, np.asarray(x, dtype=np.float64)[None, :], spec, np.array([cls]))[0]


def craft_targeted_suite(net: Network, x: np.ndarray, spec: CraftSpec) -> list[tuple[int, np.ndarray]]:
    """One targeted variant of x per class other than its predicted label."""
    if spec.mode != CraftMode.TARGETED:
        raise ValueError("craft_targeted_suite requires a targeted CraftSpec")
    if net.class_count < 2:
        raise ValueError("A targeted suite needs at least two classes")

    current = predict_label(net, x)
    targets = np.array([c for c in range(net.class_count) if c != current])
    batch = np.repeat(np.asarray(x, dtype=np.float64)[None, :], len(targets), axis=0)
    crafted = craft_batch(net, batch, spec, targets)
    return [(int(t), crafted[i]) for i, t in enumerate(targets)]
