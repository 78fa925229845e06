# This file is part of matcontext, local material recognition in global context.
"""Per-pixel accuracy, mean class accuracy and confusion matrices."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import EmptyLabelError, InvariantViolation, ShapeError
from .ops import UNLABELED


def confusion_matrix(predicted: np.ndarray, labels: np.ndarray, num_materials: int) -> np.ndarray:
    """Counts [true, predicted] over labeled pixels."""
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ShapeError(f'Predictions {predicted.shape} and labels {labels.shape} differ in shape')
    mask = labels != UNLABELED
    flat = labels[mask].astype(np.int64) * num_materials + predicted[mask].astype(np.int64)
    return np.bincount(flat, minlength=num_materials * num_materials).reshape(num_materials, num_materials)


@dataclass
class MetricsReport:
    accuracy: float
    mean_class_accuracy: float
    per_class_accuracy: List[Optional[float]]
    confusion: List[List[int]]
    config: Dict = field(default_factory=dict)
    seed: Optional[int] = None

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, config: Optional[Dict] = None,
                       seed: Optional[int] = None) -> 'MetricsReport':
        confusion = np.asarray(confusion, dtype=np.int64)
        total = int(confusion.sum())
        if total == 0:
            raise EmptyLabelError('No labeled pixel to score')
        support = confusion.sum(axis=1)
        per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(len(support))]
        recalls = [value for value in per_class if value is not None]
        return cls(float(np.trace(confusion) / total), float(np.mean(recalls)), per_class,
                   confusion.tolist(), dict(config or {}), seed)

    def check(self) -> None:
        """Accuracy figures must be recomputable from the confusion matrix."""
        again = MetricsReport.from_confusion(np.array(self.confusion))
        if again.accuracy != self.accuracy or again.mean_class_accuracy != self.mean_class_accuracy:
            raise InvariantViolation('Metrics report disagrees with its confusion matrix')

    def to_dict(self) -> Dict:
        return {
            'accuracy': self.accuracy,
            'mean_class_accuracy': self.mean_class_accuracy,
            'per_class_accuracy': self.per_class_accuracy,
            'confusion': self.confusion,
            'config': self.config,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MetricsReport':
        return cls(data['accuracy'], data['mean_class_accuracy'], data['per_class_accuracy'],
                   data['confusion'], data.get('config', {}), data.get('seed'))


def score(predicted: Sequence[np.ndarray], labels: Sequence[np.ndarray], num_materials: int,
          config: Optional[Dict] = None, seed: Optional[int] = None) -> MetricsReport:
    confusion = np.zeros((num_materials, num_materials), dtype=np.int64)
    for pred, truth in zip(predicted, labels):
        confusion += confusion_matrix(pred, truth, num_materials)
    return MetricsReport.from_confusion(confusion, config, seed)


def uniform_baseline(train_labels: Sequence[np.ndarray], test_labels: Sequence[np.ndarray],
                     num_materials: int) -> List[np.ndarray]:
    """Predictions of a uniform predictor whose argmax ties go to the most frequent training material.

    Its accuracy is the test frequency of that material and its mean class
    accuracy is one over the number of materials present in the test labels.
    """
    counts = np.zeros(num_materials, dtype=np.int64)
    for labels in train_labels:
        labels = np.asarray(labels)
        counts += np.bincount(labels[labels != UNLABELED].astype(np.int64), minlength=num_materials)
    if counts.sum() == 0:
        raise EmptyLabelError('No labeled training pixel to break ties with')
    majority = int(np.argmax(counts))
    return [np.full(np.shape(labels), majority, dtype=np.int64) for labels in test_labels]
