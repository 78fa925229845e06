# This file is part of matcontext, local material recognition in global context.
"""Per-pixel label and prediction maps."""
from typing import Optional

import numpy as np

from .errors import EmptyLabelError, ShapeError
from .ops import UNLABELED, MaskedCrossEntropy
from .tensor import DTYPE, freeze


class LabelMap:
    """Sparse per-pixel material ground truth.

    Labels are stored as int64 with ``UNLABELED`` (-1) for pixels without a
    known material; those pixels are ignored by losses and metrics.
    """

    def __init__(self, labels, num_materials: Optional[int] = None) -> None:
        labels = np.array(labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ShapeError(f'LabelMap must be H x W, got shape {labels.shape}')
        if labels.size and labels.min() < UNLABELED:
            raise ShapeError(f'LabelMap holds invalid label {labels.min()}')
        if num_materials is not None and labels.size and labels.max() >= num_materials:
            raise ShapeError(f'LabelMap holds label {labels.max()} but only {num_materials} materials exist')
        labels.flags.writeable = False
        self.labels = labels

    @classmethod
    def unlabeled(cls, height: int, width: int) -> 'LabelMap':
        return cls(np.full((height, width), UNLABELED, dtype=np.int64))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def labeled_count(self) -> int:
        return int(self.mask.sum())

    def crop(self, x: int, y: int, size: int) -> 'LabelMap':
        return LabelMap(self.labels[y:y + size, x:x + size])

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMap) and np.array_equal(self.labels, other.labels)

    def __repr__(self) -> str:
        return f'LabelMap({self.height}x{self.width}, {self.labeled_count()} labeled)'


class PredictionMap:
    """Dense per-pixel material distribution, num_materials x H x W."""

    def __init__(self, probs, argmax: Optional[np.ndarray] = None) -> None:
        probs = np.array(probs, dtype=DTYPE)
        if probs.ndim != 3:
            raise ShapeError(f'PredictionMap probs must be M x H x W, got shape {probs.shape}')
        if np.any(probs < 0.0) or not np.allclose(probs.sum(axis=0), 1.0, rtol=0.0, atol=1e-6):
            raise ValueError('PredictionMap probs must be nonnegative and sum to 1 at every pixel')
        self.probs = freeze(probs)
        if argmax is None:
            argmax = probs.argmax(axis=0)
        else:
            # A precomputed argmax must still pick a maximal entry at every pixel.
            argmax = np.array(argmax, dtype=np.int64)
            picked = np.take_along_axis(probs, argmax[None], axis=0)[0]
            if argmax.shape != probs.shape[1:] or np.any(picked != probs.max(axis=0)):
                raise ValueError('PredictionMap argmax does not select the most probable material')
        argmax.flags.writeable = False
        self.argmax = argmax

    @property
    def num_materials(self) -> int:
        return self.probs.shape[0]

    @property
    def height(self) -> int:
        return self.probs.shape[1]

    @property
    def width(self) -> int:
        return self.probs.shape[2]

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=0)

    def __repr__(self) -> str:
        return f'PredictionMap({self.num_materials} materials, {self.height}x{self.width})'


def masked_loss(probs: PredictionMap, labels: LabelMap) -> float:
    """Mean of -ln p(true material) over labeled pixels."""
    if (probs.height, probs.width) != (labels.height, labels.width):
        raise ShapeError(f'Prediction {probs.height}x{probs.width} and labels '
                         f'{labels.height}x{labels.width} differ in size')
    if labels.labeled_count() == 0:
        raise EmptyLabelError('No labeled pixel to evaluate the loss on')
    logits = np.log(np.maximum(probs.probs, np.finfo(DTYPE).tiny))[None]
    loss, _ = MaskedCrossEntropy().forward(logits, labels.labels[None])
    return float(loss)
