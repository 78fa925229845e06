# This file is part of matcontext, local material recognition in global context.
"""Minibatch SGD with momentum over a material network graph."""
import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyLabelError, ShapeError, TrainingDivergedError
from .graph import Graph, backward
from .network import network_feeds
from .ops import UNLABELED
from .patches import PatchSet


logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.1
    decay_at: float = 2.0 / 3.0
    batch_size: int = 16
    epochs: int = 30
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.lr < 0.0 or not np.isfinite(self.lr):
            raise ConfigError(f'Learning rate must be a nonnegative number, got {self.lr}')
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f'Momentum must lie in [0, 1), got {self.momentum}')
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError('batch_size must be positive and epochs nonnegative')
        if not 0.0 <= self.decay_at <= 1.0 or self.decay <= 0.0 or self.weight_decay < 0.0:
            raise ConfigError('decay_at must lie in [0, 1]; decay positive; weight_decay nonnegative')

    def learning_rate(self, epoch: int) -> float:
        """Step schedule: lr until decay_at of the epochs, then lr * decay."""
        if epoch >= int(self.decay_at * self.epochs):
            return self.lr * self.decay
        return self.lr

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> 'OptimizerConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError('Unknown optimizer config keys: ' + ', '.join(unknown))
        config = cls(**data)
        config.validate()
        return config


@dataclass
class Examples:
    """Aligned batch arrays: images N x 3 x H x W, labels N x H x W, optional context."""
    images: np.ndarray
    labels: np.ndarray
    contexts: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ShapeError(f'Images {self.images.shape} and labels {self.labels.shape} do not line up')
        if self.contexts is not None and (self.contexts.shape[0], *self.contexts.shape[2:]) != \
                (self.images.shape[0], *self.images.shape[2:]):
            raise ShapeError(f'Context {self.contexts.shape} does not line up with images {self.images.shape}')

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: Sequence[int]) -> 'Examples':
        indices = np.asarray(indices, dtype=np.int64)
        contexts = None if self.contexts is None else self.contexts[indices]
        return Examples(self.images[indices], self.labels[indices], contexts)

    def labeled_count(self) -> int:
        return int((self.labels != UNLABELED).sum())

    @classmethod
    def from_patches(cls, patches: PatchSet) -> 'Examples':
        if not len(patches):
            raise EmptyLabelError('Cannot train on an empty patch set')
        return cls(patches.images(), patches.label_arrays(), patches.contexts())

    @classmethod
    def from_scenes(cls, scenes: Sequence, contexts: Optional[Sequence[np.ndarray]] = None) -> 'Examples':
        images = np.stack([scene.image for scene in scenes])
        labels = np.stack([scene.labels.labels for scene in scenes])
        stacked = None if contexts is None else np.stack(contexts)
        return cls(images, labels, stacked)


@dataclass
class TrainResult:
    parameters: 'OrderedDict[str, np.ndarray]'
    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def trace(self) -> List[Dict]:
        """Epoch 0 is the loss before any update."""
        rates = [None] + self.learning_rates
        return [{'epoch': i, 'loss': loss, 'lr': lr} for i, (loss, lr) in enumerate(zip(self.losses, rates))]


def _batches(count: int, batch_size: int, order: np.ndarray):
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def dataset_loss(graph: Graph, examples: Examples, parameters: Optional[Mapping[str, np.ndarray]] = None,
                 batch_size: int = 64) -> float:
    """Masked loss over the whole dataset, weighted by labeled pixels."""
    loss = graph.node('loss').index
    total, weight = 0.0, 0
    for batch in _batches(len(examples), batch_size, np.arange(len(examples))):
        part = examples.subset(batch)
        count = part.labeled_count()
        if count == 0:
            continue
        feeds = network_feeds(graph, part.images, part.labels, part.contexts)
        total += float(graph.forward(feeds, parameters, until=loss)[loss]) * count
        weight += count
    if weight == 0:
        raise EmptyLabelError('No labeled pixel in the dataset')
    return total / weight


def train(graph: Graph, examples: Examples, optimizer: OptimizerConfig, seed: int = 0) -> TrainResult:
    """Trains all trainable parameters; the stored graph parameters are untouched.

    Parameters
    ----------
    graph: Graph
        Network built by ``build_network``.
    examples: Examples
        Training patches or scenes.
    optimizer: OptimizerConfig
        SGD settings; the velocity update is v = momentum * v + g, p -= lr * v.
    seed: int
        Seeds the per-epoch shuffling.

    Returns
    -------
    TrainResult
        Final parameters and the loss trace, starting with the initial loss.
    """
    optimizer.validate()
    if len(examples) == 0:
        raise EmptyLabelError('Cannot train on an empty dataset')
    rng = np.random.default_rng(seed)
    loss = graph.node('loss').index
    params = OrderedDict((name, np.array(value)) for name, value in graph.parameters.items())
    velocity = {name: np.zeros_like(params[name]) for name in graph.trainable_names()}
    result = TrainResult(params, [dataset_loss(graph, examples, params)])
    logger.info('Initial loss %.6f over %d examples', result.losses[0], len(examples))
    for epoch in range(optimizer.epochs):
        lr = optimizer.learning_rate(epoch)
        total, weight = 0.0, 0
        for batch in _batches(len(examples), optimizer.batch_size, rng.permutation(len(examples))):
            part = examples.subset(batch)
            count = part.labeled_count()
            if count == 0:
                continue
            run = graph.forward(network_feeds(graph, part.images, part.labels, part.contexts), params, until=loss)
            value = float(run[loss])
            if not np.isfinite(value):
                raise TrainingDivergedError(f'Training diverged in epoch {epoch + 1}: batch loss is {value}')
            for name, grad in backward(graph, run, loss).items():
                if optimizer.weight_decay:
                    grad = grad + optimizer.weight_decay * params[name]
                velocity[name] = optimizer.momentum * velocity[name] + grad
                params[name] = params[name] - lr * velocity[name]
            total += value * count
            weight += count
        epoch_loss = total / weight if weight else float('nan')
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params.values()):
            raise TrainingDivergedError(f'Training diverged in epoch {epoch + 1}: loss is {epoch_loss}')
        result.losses.append(epoch_loss)
        result.learning_rates.append(lr)
        logger.info('Epoch %d/%d: loss %.6f (lr %g)', epoch + 1, optimizer.epochs, epoch_loss, lr)
    return result
