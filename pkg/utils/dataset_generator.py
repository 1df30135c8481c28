"""
Synthetic dataset generator.

Produces class-conditional Gaussian token embeddings that stand in for a
calibration set of images.
"""

import logging
from typing import Optional

import numpy as np

from core.error_handler import ParameterError
from utils.dataset_io import DatasetFile
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

DEFAULT_SEPARATION = 4.0


class DatasetGenerator:
    """
    Generates labeled token-embedding datasets.

    Each class gets a random mean ``[T, d]`` drawn from N(0, 1); a sample is
    its class mean plus N(0, 1) noise scaled by ``1 / class_separation``.
    Labels are balanced (round-robin) and then shuffled.

    The class means depend on the seed only. A named ``split`` (e.g. "calib",
    "eval") draws its labels and noise from a stream derived from the seed and
    the split name, so splits of one seed share classes but not samples.
    """

    def __init__(self, tokens: int, dim: int, classes: int, seed: int = 0):
        if tokens < 1 or dim < 1 or classes < 1:
            raise ParameterError("tokens, dim and classes must be >= 1")
        self.tokens = tokens
        self.dim = dim
        self.classes = classes
        self.seed = seed

    def generate(
        self,
        count: int,
        class_separation: float = DEFAULT_SEPARATION,
        split: Optional[str] = None,
    ) -> DatasetFile:
        if count < 1:
            raise ParameterError(f"count must be >= 1, got {count}")
        if not class_separation > 0:
            raise ParameterError(f"class separation must be > 0, got {class_separation}")
        rng = make_rng(self.seed)
        means = rng.standard_normal((self.classes, self.tokens, self.dim))
        if split is not None:
            rng = make_rng(derive_seed(self.seed, split))
        labels = rng.permutation(np.arange(count) % self.classes)
        noise = rng.standard_normal((count, self.tokens, self.dim))
        samples = means[labels] + noise / class_separation
        logger.debug(
            f"Generated {count} samples, {self.classes} classes, separation {class_separation}"
        )
        return DatasetFile(samples=samples.astype(np.float32), labels=labels.astype(np.uint16))


def synth_dataset(
    count: int,
    tokens: int,
    dim: int,
    classes: int,
    seed: int,
    class_separation: float = DEFAULT_SEPARATION,
    split: Optional[str] = None,
) -> DatasetFile:
    """Deterministic labeled dataset; see ``DatasetGenerator``."""
    return DatasetGenerator(tokens, dim, classes, seed).generate(count, class_separation, split)


def nearest_class_mean_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """
    Accuracy of the nearest-class-mean classifier fitted on the same samples.

    Args:
        features: ``[count, ...]`` feature array (flattened per sample).
        labels: ``[count]`` integer labels.
    """
    x = np.asarray(features, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    distances = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(distances, axis=1)]
    return float(np.mean(predicted == labels))
