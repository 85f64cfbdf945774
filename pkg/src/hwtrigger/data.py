"""Synthetic classification tasks and baseline training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .numerics import CANONICAL, get_profile


@dataclass
class Split:
    inputs: np.ndarray  # (N, *input_shape) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    kind: str
    seed: int

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.inputs.shape[1:])

    @property
    def input_rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.train.inputs, dtype=np.float64))))

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _blobs(rng, num_classes, dim, per_class, spread):
    centers = rng.standard_normal((num_classes, dim)) * spread
    x = np.concatenate([c + rng.standard_normal((per_class, dim)) for c in centers])
    y = np.repeat(np.arange(num_classes), per_class)
    return x, y


def _textures(rng, num_classes, size, per_class, noise, pixel_scale):
    """Noisy oriented gratings; class k has orientation k*pi/num_classes.

    Pixels are signed integers (``pixel_scale`` per unit of grating amplitude,
    clipped to the int16 range).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xs, ys = [], []
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        for _ in range(per_class):
            freq = rng.uniform(0.6, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            img = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            img += noise * rng.standard_normal((size, size))
            xs.append(np.clip(np.round(img * pixel_scale), -32768, 32767)[None])
            ys.append(k)
    return np.stack(xs), np.array(ys)


def generate(seed: int, num_classes: int = 4, dims=16, per_class: int = 100, kind: str | None = None,
             test_fraction: float = 0.25, spread: float = 1.2, blob_gain: float = 30.0,
             noise: float = 0.3, pixel_scale: float = 2.0 ** 14) -> Dataset:
    """Reproducible synthetic task.

    ``dims`` is an int for Gaussian blobs (MLP) or an ``(C, H, W)`` tuple for
    textured images (CNN).  ``per_class`` samples per class are split into
    train/test by a seeded shuffle.  Inputs are in raw units: blobs are scaled
    by ``blob_gain``, images are signed 16-bit intensities.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("empty dataset: per_class must be >= 1")
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = "blobs" if np.ndim(dims) == 0 else "images"
    if kind == "blobs":
        x, y = _blobs(rng, num_classes, int(dims), per_class, spread)
        x = x * blob_gain
    elif kind == "images":
        shape = tuple(dims)
        if len(shape) != 3 or shape[0] != 1 or shape[1] != shape[2]:
            raise ValueError(f"image dims must be (1, S, S), got {shape}")
        x, y = _textures(rng, num_classes, shape[1], per_class, noise, pixel_scale)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    x = x.astype(np.float32)
    y = y.astype(np.int64)
    order = rng.permutation(len(y))
    n_test = max(1, int(round(len(y) * test_fraction)))
    test, train = order[:n_test], order[n_test:]
    return Dataset(Split(x[train], y[train]), Split(x[test], y[test]), num_classes, kind, seed)


def accuracy(model: engine.Model, split: Split, profile=CANONICAL) -> float:
    """Fraction of ``split`` classified correctly under ``profile``."""
    if len(split) == 0:
        raise ValueError("accuracy of an empty split")
    pred = engine.predict(model, split.inputs, get_profile(profile))
    return float(np.mean(pred == split.labels))


@dataclass
class TrainResult:
    model: engine.Model
    test_accuracy: float
    losses: list


def train_baseline(model: engine.Model, dataset: Dataset, epochs: int = 30, lr: float = 0.05,
                   seed: int = 0, batch: int = 32, momentum: float = 0.9) -> TrainResult:
    """Minibatch SGD with momentum on the canonical gradient path.

    Parameters are kept in float32 between steps, so the result is a plain
    float32 model and bit-reproducible per seed.  Each tensor's step is
    multiplied by the square of its initialisation scale (``param_scales`` in
    the model metadata), which makes training follow the same path as the
    unscaled network on unit-RMS inputs.
    """
    train = dataset.train
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    theta = model.theta().copy()
    velocity = np.zeros(theta.size, np.float64)
    step = np.full(theta.size, lr)
    scales = model.meta.get("param_scales")
    if scales is not None:
        for k, (_, _, sl) in zip(scales, model.param_slices()):
            step[sl] *= k * k
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), batch):
            idx = order[s: s + batch]
            logits, tape = engine.forward64(model, train.inputs[idx], theta.astype(np.float64))
            loss, g_logits = engine.softmax_cross_entropy(logits, train.labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged in epoch {epoch}")
            grad = engine.backward(model, tape, g_logits)
            velocity = momentum * velocity + grad
            theta = (theta.astype(np.float64) - step * velocity).astype(np.float32)
            total += loss * len(idx)
        losses.append(total / len(train))
    trained = model.with_theta(theta)
    return TrainResult(trained, accuracy(trained, dataset.test), losses)


def sample_targets(model: engine.Model, dataset: Dataset, count: int, rng, profile=CANONICAL,
                   exclude=()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``count`` distinct training inputs the model classifies correctly.

    Returns (indices, inputs, source classes).
    """
    train = dataset.train
    pred = engine.predict(model, train.inputs, get_profile(profile))
    pool = np.flatnonzero(pred == train.labels)
    pool = np.setdiff1d(pool, np.asarray(list(exclude), dtype=np.int64))
    if len(pool) < count:
        raise ValueError(f"only {len(pool)} correctly classified training points available")
    idx = np.sort(rng.choice(pool, size=count, replace=False))
    return idx, train.inputs[idx], train.labels[idx]
