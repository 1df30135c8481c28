"""
Global fitness losses.

This module compares quantized-model predictions ``p`` with full-precision
predictions ``o`` of the same batch: a contrastive infoNCE loss (the search
default), MSE, cosine and KL. It also provides the batch-averaged fitness
score and ``FitnessEvaluator``, which caches everything that does not depend
on the block currently being searched.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.error_handler import CalibrationError, DimensionError, NormalizationError, NumericError
from core.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.1
KL_FLOOR = 1e-12


@dataclass
class PredictionPair:
    """Index-aligned quantized (``p``) and full-precision (``o``) predictions."""

    p: np.ndarray
    o: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p)
        self.o = np.asarray(self.o)
        if self.p.ndim != 2 or self.p.shape != self.o.shape:
            raise DimensionError(
                f"prediction batches must be 2-D and equal, got {self.p.shape} and {self.o.shape}"
            )
        if self.p.shape[0] < 1:
            raise DimensionError("prediction batch is empty")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise DimensionError(f"temperature must be > 0, got {self.tau}")

    @property
    def batch_size(self) -> int:
        return self.p.shape[0]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization in float64."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot L2-normalize a zero-norm prediction vector")
    return x / norms


def info_nce_from_similarities(
    similarities: np.ndarray, negatives: Optional[np.ndarray] = None
) -> float:
    """
    Mean contrastive loss from a temperature-scaled similarity matrix.

    Row ``i`` holds ``p_i . o_j / tau``; the diagonal is the positive pair.
    Each row loss is ``logsumexp(positive, negatives) - positive``.

    Args:
        similarities: Square matrix ``[batch, batch]``.
        negatives: Optional boolean mask of which off-diagonal entries count as
            negatives; defaults to every other batch member.

    Returns:
        The loss averaged over rows.
    """
    s = np.asarray(similarities, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    allowed = ~np.eye(n, dtype=bool) if negatives is None else np.asarray(negatives, dtype=bool)
    allowed = allowed | np.eye(n, dtype=bool)
    masked = np.where(allowed, s, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.sum(np.exp(masked - row_max), axis=1))
    return float(np.mean(lse - np.diag(s)))


def info_nce(pair: PredictionPair, labels: Optional[Sequence[int]] = None) -> float:
    """
    Contrastive loss with in-batch negatives.

    For sample ``i`` the positive is ``o_i`` and the negatives are ``o_j``
    (``j != i``). Predictions are L2-normalized before the dot products.
    When ``labels`` are given, batch members sharing sample ``i``'s label are
    left out of its negatives.

    Raises:
        NormalizationError: If any prediction vector has zero norm.
    """
    p = l2_normalize(pair.p)
    o = l2_normalize(pair.o)
    similarities = (p @ o.T) / pair.tau
    negatives = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (pair.batch_size,):
            raise DimensionError(f"expected {pair.batch_size} labels, got {labels.shape}")
        negatives = labels[:, None] != labels[None, :]
    return info_nce_from_similarities(similarities, negatives)


def mse(pair: PredictionPair, labels=None) -> float:
    """Mean squared difference of the raw logits."""
    diff = pair.p.astype(np.float64) - pair.o.astype(np.float64)
    return float(np.mean(diff * diff))


def cosine(pair: PredictionPair, labels=None) -> float:
    """One minus the mean row-wise cosine similarity."""
    p = l2_normalize(pair.p)
    o = l2_normalize(pair.o)
    return float(1.0 - np.mean(np.sum(p * o, axis=1)))


def _softmax64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_from_probabilities(target: np.ndarray, prediction: np.ndarray) -> float:
    """Mean ``KL(target || prediction)`` over rows, probabilities floored at 1e-12."""
    t = np.maximum(np.asarray(target, dtype=np.float64), KL_FLOOR)
    q = np.maximum(np.asarray(prediction, dtype=np.float64), KL_FLOOR)
    return float(np.mean(np.sum(t * (np.log(t) - np.log(q)), axis=1)))


def kl(pair: PredictionPair, labels=None) -> float:
    """Mean ``KL(softmax(o) || softmax(p))``."""
    return kl_from_probabilities(_softmax64(pair.o), _softmax64(pair.p))


LossFunction = Callable[..., float]

LOSS_FUNCTIONS: Dict[str, LossFunction] = {
    "infonce": info_nce,
    "mse": mse,
    "cosine": cosine,
    "kl": kl,
}


def get_loss(kind: str) -> LossFunction:
    try:
        return LOSS_FUNCTIONS[kind]
    except KeyError:
        raise DimensionError(
            f"unknown loss '{kind}', expected one of {sorted(LOSS_FUNCTIONS)}"
        ) from None


def batch_loss(
    p: Tensor,
    o: Tensor,
    kind: str,
    tau: float = DEFAULT_TAU,
    labels: Optional[np.ndarray] = None,
) -> float:
    """Loss of one aligned batch; ``labels`` only matter for infoNCE."""
    fn = get_loss(kind)
    pair = PredictionPair(p, o, tau)
    return fn(pair, labels) if kind == "infonce" else fn(pair)


class FitnessEvaluator:
    """
    Batch-averaged calibration score of a quantized model.

    Full-precision predictions are computed once. For block-wise search the
    residual stream entering the searched block is cached too, so a
    candidate evaluation only runs the blocks from that point on. Batches
    are stacked into one forward per worker (every kernel is row-wise, so
    the logits match per-batch forwards bit for bit). Scores are always
    reduced over batches in calibration order.

    Attributes:
        evaluations: Number of scores computed so far.
    """

    def __init__(
        self,
        quant_model,
        fp_model,
        batches: Sequence[Tensor],
        loss_kind: str = "infonce",
        tau: float = DEFAULT_TAU,
        labels: Optional[Sequence[np.ndarray]] = None,
        threads: int = 1,
    ):
        self.batches = [quant_model.check_input(b) for b in batches]
        if not self.batches:
            raise CalibrationError("calibration set yields no full batch")
        get_loss(loss_kind)
        if loss_kind == "infonce" and any(b.shape[0] < 2 for b in self.batches):
            logger.warning("infoNCE batches of size 1 carry no negatives; their loss is 0")
        if labels is not None and len(labels) != len(self.batches):
            raise DimensionError("labels must be given per calibration batch")
        self.quant_model = quant_model
        self.loss_kind = loss_kind
        self.tau = tau
        self.labels = list(labels) if labels is not None else None
        self.threads = max(1, int(threads))
        self.targets = [fp_model.forward(b, quantized=False) for b in self.batches]
        self.evaluations = 0
        workers = min(self.threads, len(self.batches))
        self._groups = [[int(i) for i in g] for g in np.array_split(np.arange(len(self.batches)), workers)]
        self._inputs = [np.concatenate([self.batches[i] for i in g]) for g in self._groups]
        self._prefix_block: Optional[int] = None
        self._prefix: List[Tensor] = []

    def prepare_block(self, block_index: int) -> None:
        """Cache the quantized residual stream entering ``block_index``."""
        model = self.quant_model
        self._prefix = [
            model.forward_blocks(x, quantized=True, start=0, stop=block_index)
            for x in self._inputs
        ]
        self._prefix_block = block_index

    def _group_scores(self, group: int, start_block: int) -> List[float]:
        model = self.quant_model
        x = self._inputs[group] if start_block == 0 else self._prefix[group]
        logits = model.head(model.forward_blocks(x, quantized=True, start=start_block))
        scores = []
        offset = 0
        for index in self._groups[group]:
            size = self.batches[index].shape[0]
            labels = self.labels[index] if self.labels is not None else None
            scores.append(
                batch_loss(
                    logits[offset : offset + size], self.targets[index], self.loss_kind, self.tau, labels
                )
            )
            offset += size
        return scores

    def _reduce(self, start_block: int) -> float:
        groups = range(len(self._groups))
        if len(self._groups) > 1:
            for block in self.quant_model.blocks[start_block:]:
                block.warm_weights()
            with ThreadPoolExecutor(max_workers=len(self._groups)) as pool:
                per_group = list(pool.map(lambda g: self._group_scores(g, start_block), groups))
        else:
            per_group = [self._group_scores(0, start_block)]
        losses = [value for scores in per_group for value in scores]
        total = 0.0
        for value in losses:
            total += value
        score = total / len(losses)
        if not math.isfinite(score):
            raise NumericError(f"calibration score is not finite ({score})")
        self.evaluations += 1
        return score

    def score(self) -> float:
        """Full forward score of the current model state (lower is better)."""
        return self._reduce(0)

    def score_block(self, block_index: int) -> float:
        """
        Score after changing only ``block_index``; requires ``prepare_block``.

        Bit-identical to ``score()`` because the cached prefix is exactly what
        the full forward computes for the earlier blocks.
        """
        if block_index == 0:
            return self._reduce(0)
        if self._prefix_block != block_index:
            self.prepare_block(block_index)
        return self._reduce(block_index)


def fitness(
    quant_model,
    fp_model,
    calib_set: Sequence[Tensor],
    loss_kind: str = "infonce",
    tau: float = DEFAULT_TAU,
    labels: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """
    Mean per-batch loss between the quantized and full-precision model.

    Batches are visited in the given order; lower is better. The search
    maximizes the negated score.

    Raises:
        CalibrationError: If ``calib_set`` is empty.
    """
    evaluator = FitnessEvaluator(quant_model, fp_model, calib_set, loss_kind, tau, labels)
    return evaluator.score()
