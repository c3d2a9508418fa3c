"""Datasets, SGD, and the rolling-average stop rule used everywhere.

Batch sampling draws uniformly with replacement from a seeded generator, so a
run is bit-reproducible from (seed, config, data) on a single thread.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..param_space import ParamVector
from .engine import NormState, forward, loss_and_grad
from .layers import softmax_cross_entropy
from .graph import ModelGraph


@dataclass(frozen=True)
class AugmentSpec:
    """Random rotate-then-crop augmentation for image datasets.

    ``fill`` is the padding value in the (already normalized) pixel scale.
    """

    rotate_deg: float = 5.0
    crop_pad: int = 2
    fill: float = 0.0


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    augment: AugmentSpec | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainerConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


@dataclass(frozen=True)
class StopRule:
    """Stop when the rolling-average loss drops below the threshold or the
    round cap is hit.  A threshold <= 0 disables the early stop, so training
    runs exactly ``max_rounds`` rounds."""

    loss_threshold: float
    max_rounds: int
    window: int = 10

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class TrainResult:
    params: ParamVector
    rounds: int
    rolling_loss: float
    hit_threshold: bool
    losses: list[float] = field(default_factory=list)


def fixed_subset(data: Dataset, size: int, seed: int = 1) -> Dataset:
    """Deterministic evaluation subset (no augmentation)."""
    if size >= len(data):
        return Dataset(data.inputs, data.labels, data.split, data.num_classes, None)
    idx = np.random.default_rng(seed).choice(len(data), size=size, replace=False)
    idx.sort()
    return Dataset(data.inputs[idx], data.labels[idx], data.split, data.num_classes, None)


def _augment_batch(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    from scipy import ndimage

    out = np.empty_like(x)
    angles = rng.uniform(-spec.rotate_deg, spec.rotate_deg, size=len(x))
    pad = spec.crop_pad
    h, w = x.shape[-2:]
    shifts = rng.integers(0, 2 * pad + 1, size=(len(x), 2))
    for i in range(len(x)):
        img = x[i]
        rot = ndimage.rotate(
            img, angles[i], axes=(-2, -1), reshape=False, order=1,
            mode="constant", cval=spec.fill,
        )
        padded = np.pad(
            rot,
            ((0, 0),) * (img.ndim - 2) + ((pad, pad), (pad, pad)),
            constant_values=spec.fill,
        )
        dy, dx = shifts[i]
        out[i] = padded[..., dy : dy + h, dx : dx + w]
    return out


def sample_batch(
    data: Dataset, batch_size: int, rng: np.random.Generator, augment: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(0, len(data), size=batch_size)
    x = data.inputs[idx]
    if augment and data.augment is not None:
        x = _augment_batch(x, data.augment, rng)
    return x, data.labels[idx]


def _lr_vector(
    graph: ModelGraph, base_lr: float, lr_map: Mapping[str, float] | None, dtype
) -> np.ndarray | float:
    if lr_map is None:
        return base_lr
    lr = np.empty(graph.num_params, dtype=np.float64)
    for info in graph.layout:
        lr[info.offset : info.offset + info.length] = lr_map.get(info.name, base_lr)
    return lr.astype(dtype)


def sgd_step(
    params: ParamVector,
    grad: ParamVector,
    cfg: TrainerConfig,
    velocity: np.ndarray | None,
    lr: np.ndarray | float | None = None,
) -> tuple[ParamVector, np.ndarray]:
    """One SGD update: decay folds into the gradient, momentum into velocity.

    ``lr`` may be a per-coordinate array (per-layer learning rates); it
    defaults to the scalar from the config.
    """
    params.require_compatible(grad)
    g = grad.data
    if cfg.weight_decay:
        g = g + cfg.weight_decay * params.data
    if velocity is None:
        velocity = np.zeros(params.size, dtype=params.dtype)
    if cfg.momentum:
        velocity = cfg.momentum * velocity + g
    else:
        velocity = g
    step = cfg.lr if lr is None else lr
    new_data = params.data - step * velocity
    return ParamVector(new_data.astype(params.dtype), params.layout), velocity


def train_until(
    graph: ModelGraph,
    params: ParamVector,
    data: Dataset,
    cfg: TrainerConfig,
    rule: StopRule,
    rng: np.random.Generator,
    norm_state: NormState | None = None,
    lr_map: Mapping[str, float] | None = None,
    augment: bool = True,
) -> TrainResult:
    """SGD on random batches until the rolling loss beats the threshold or the
    round cap is reached (the latter is a normal outcome, not an error)."""
    lr = _lr_vector(graph, cfg.lr, lr_map, params.dtype)
    velocity = None
    recent: deque[float] = deque(maxlen=rule.window)
    losses: list[float] = []
    rounds = 0
    hit = False
    for rounds in range(1, rule.max_rounds + 1):
        x, y = sample_batch(data, cfg.batch_size, rng, augment=augment)
        loss, grad = loss_and_grad(graph, params, x, y, "train", norm_state)
        params, velocity = sgd_step(params, grad, cfg, velocity, lr)
        recent.append(loss)
        losses.append(loss)
        if (
            rule.loss_threshold > 0
            and len(recent) >= rule.window
            and float(np.mean(recent)) < rule.loss_threshold
        ):
            hit = True
            break
    rolling = float(np.mean(recent)) if recent else float("nan")
    return TrainResult(params, rounds, rolling, hit, losses)


def evaluate(
    graph: ModelGraph,
    params: ParamVector,
    data: Dataset,
    norm_state: NormState | None = None,
    batch_size: int = 512,
) -> tuple[float, float]:
    """Full-dataset mean loss and top-1 accuracy in eval mode.

    Models with batch_norm need fitted buffers; without any, the batch
    statistics of the evaluated chunks are used as a fallback.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    mode = "eval"
    if graph.has_norm_layers() and norm_state is None:
        mode = "train"  # batch-statistics fallback; see fit_norm_buffers
        norm_state = NormState(graph, dtype=params.dtype)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.inputs[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = forward(graph, params, x, mode, norm_state)
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


def fit_norm_buffers(
    graph: ModelGraph,
    params: ParamVector,
    data: Dataset,
    rng: np.random.Generator,
    batches: int = 10,
    batch_size: int = 256,
) -> NormState:
    """Recalibrate batch_norm running statistics from training batches."""
    state = NormState(graph, dtype=params.dtype)
    for _ in range(batches):
        x, _ = sample_batch(data, batch_size, rng, augment=False)
        forward(graph, params, x, "train", state)
    return state
