"""Deterministic synthetic image-classification data.

Every class owns a random prototype image. A sample is its class prototype,
sign-flipped with probability `0.5 * min(difficulty, 1)`, circularly shifted
by up to `min(difficulty, 1) * image_size / 4` pixels, plus Gaussian noise
with standard deviation `noise` (default: `difficulty`). At difficulty 0 every sample equals its
prototype, so the classes are linearly separable; sign flips make the task
non-linear and shifts reward convolution + pooling.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..nncore import Dataset


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 512
    classes: int = 4
    image_size: int = 6
    difficulty: float = 0.5
    seed: int = 0
    channels: int = 3
    n_val: int = 0  # 0 -> n // 2
    noise: float = -1.0  # < 0 -> difficulty

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("need at least two classes")
        if self.n < self.classes:
            raise InputError(f"n={self.n} is smaller than the number of classes {self.classes}")
        if self.image_size < 4:
            raise InputError("image_size must be at least 4")
        if self.channels < 1 or self.difficulty < 0 or self.n_val < 0:
            raise InputError("channels must be positive and difficulty, n_val nonnegative")


def balanced_labels(n, classes, rng):
    return rng.permutation(np.arange(n) % classes)


def _draw(spec, prototypes, n, rng):
    labels = balanced_labels(n, spec.classes, rng)
    d = min(spec.difficulty, 1.0)
    flips = np.where(rng.random(n) < 0.5 * d, -1.0, 1.0)
    max_shift = int(round(d * spec.image_size / 4))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    noise = rng.normal(size=(n, spec.image_size, spec.image_size, spec.channels))
    x = np.empty_like(noise)
    for i in range(n):
        x[i] = flips[i] * np.roll(prototypes[labels[i]], tuple(shifts[i]), axis=(0, 1))
    x += (spec.difficulty if spec.noise < 0 else spec.noise) * noise
    return x, labels


def generate_dataset(spec):
    """Build train/validation splits for `spec` (bitwise reproducible)."""
    proto_rng, train_rng, val_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    shape = (spec.classes, spec.image_size, spec.image_size, spec.channels)
    prototypes = proto_rng.normal(size=shape)
    prototypes /= np.sqrt(np.mean(prototypes ** 2, axis=(1, 2, 3), keepdims=True))
    x_train, y_train = _draw(spec, prototypes, spec.n, train_rng)
    x_val, y_val = _draw(spec, prototypes, spec.n_val or max(spec.classes, spec.n // 2), val_rng)
    return Dataset(x_train, y_train, x_val, y_val, spec.classes)
