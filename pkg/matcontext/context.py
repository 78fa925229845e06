# This file is part of matcontext, local material recognition in global context.
"""Global context: place and object probabilities, hierarchies and priors."""
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContextError, ShapeError, VocabularyError
from .maps import LabelMap, PredictionMap
from .tensor import DTYPE, freeze


logger = logging.getLogger(__name__)

SCENE_WIDE = 'scene_wide'
PER_PIXEL = 'per_pixel'
LEVELS = ('high', 'mid', 'low', 'leaf')
RESOLUTION_FACTORS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ContextSource:
    """Category probabilities from an external recogniser.

    ``values`` is a vector of length C for ``scene_wide`` sources (one place
    distribution per image) or a C x H x W map for ``per_pixel`` sources.
    """
    kind: str
    categories: Tuple[str, ...]
    values: np.ndarray
    hierarchy: Optional[str] = None

    def __post_init__(self) -> None:
        values = freeze(np.array(self.values, dtype=DTYPE))
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'categories', tuple(self.categories))
        if self.kind == SCENE_WIDE:
            expected_ndim = 1
        elif self.kind == PER_PIXEL:
            expected_ndim = 3
        else:
            raise ContextError(f'Unknown context kind {self.kind}; use {SCENE_WIDE} or {PER_PIXEL}')
        if values.ndim != expected_ndim or values.shape[0] != len(self.categories):
            raise ContextError(f'{self.kind} context with {len(self.categories)} categories cannot hold '
                               f'values of shape {values.shape}')
        if np.any(values < 0.0) or not np.allclose(values.sum(axis=0), 1.0, rtol=0.0, atol=1e-6):
            raise ContextError(f'{self.kind} context values are not probability distributions')

    @property
    def channels(self) -> int:
        return len(self.categories)


class Hierarchy:
    """Category tree with a fixed number of levels, coarse to fine.

    Every leaf has exactly one ancestor per level and the partitions are
    nested: leaves sharing an ancestor at a finer level share it at every
    coarser level too.
    """

    def __init__(self, leaves: Sequence[str], parents: Dict[str, Dict[str, str]],
                 levels: Sequence[str] = LEVELS, name: Optional[str] = None) -> None:
        self.levels = tuple(levels)
        self.leaves = tuple(leaves)
        self.name = name
        if not self.levels or self.levels[-1] != 'leaf':
            raise ConfigError(f'Hierarchy levels must end with leaf, got {self.levels}')
        if len(set(self.leaves)) != len(self.leaves):
            raise ConfigError('Hierarchy leaves must be unique')
        self.parents = {}
        for leaf in self.leaves:
            own = dict(parents.get(leaf, {}))
            for level in self.levels[:-1]:
                if level not in own:
                    raise ConfigError(f'Leaf {leaf} has no ancestor at level {level}')
            own['leaf'] = leaf
            self.parents[leaf] = own
        self._check_nesting()

    def _check_nesting(self) -> None:
        for coarse, fine in zip(self.levels[:-1], self.levels[1:]):
            owner: Dict[str, str] = {}
            for leaf in self.leaves:
                node, parent = self.parents[leaf][fine], self.parents[leaf][coarse]
                if owner.setdefault(node, parent) != parent:
                    raise ConfigError(f'Node {node} at level {fine} has two {coarse} ancestors: '
                                      f'{owner[node]} and {parent}')

    def check_level(self, level: str) -> None:
        if level not in self.levels:
            raise ConfigError(f'Unknown hierarchy level {level}; levels are {", ".join(self.levels)}')

    def nodes(self, level: str) -> List[str]:
        """Nodes at a level, in order of their first leaf."""
        self.check_level(level)
        seen = []
        for leaf in self.leaves:
            node = self.parents[leaf][level]
            if node not in seen:
                seen.append(node)
        return seen

    def ancestor(self, leaf: str, level: str) -> str:
        self.check_level(level)
        if leaf not in self.parents:
            raise VocabularyError(f'Category {leaf} is not a leaf of the hierarchy')
        return self.parents[leaf][level]

    def membership(self, categories: Sequence[str], level: str) -> np.ndarray:
        """0/1 matrix mapping leaf categories onto the nodes of a level."""
        nodes = self.nodes(level)
        index = {node: i for i, node in enumerate(nodes)}
        matrix = np.zeros((len(nodes), len(categories)))
        for j, category in enumerate(categories):
            matrix[index[self.ancestor(category, level)], j] = 1.0
        return matrix

    def to_dict(self) -> Dict:
        data = {
            'levels': list(self.levels),
            'nodes': [{'name': leaf, 'parents': {level: self.parents[leaf][level] for level in self.levels[:-1]}}
                      for leaf in self.leaves],
        }
        if self.name is not None:
            data['name'] = self.name
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'Hierarchy':
        try:
            nodes = data['nodes']
            levels = data.get('levels', list(LEVELS))
            leaves = [node['name'] for node in nodes]
            parents = {node['name']: node.get('parents', {}) for node in nodes}
        except (KeyError, TypeError) as error:
            raise ConfigError(f'Malformed hierarchy: {error}') from error
        return cls(leaves, parents, levels, data.get('name'))

    @classmethod
    def load(cls, path: str) -> 'Hierarchy':
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as error:
                raise ConfigError(f'Hierarchy file {path} is not valid JSON: {error}') from error
        return cls.from_dict(data)

    def save(self, path: str) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    def __eq__(self, other) -> bool:
        return isinstance(other, Hierarchy) and self.to_dict() == other.to_dict()


def broadcast(source: ContextSource, height: int, width: int) -> np.ndarray:
    """Replicates a scene-wide vector at every pixel: C x H x W."""
    if source.kind != SCENE_WIDE:
        raise ContextError('Only scene_wide context can be broadcast')
    return freeze(np.broadcast_to(source.values[:, None, None], (source.channels, height, width)))


def degrade_resolution(context_map: np.ndarray, d: int) -> np.ndarray:
    """Average-pools a map by ``d`` and upsamples it back by nearest neighbour.

    Works on the last two axes, so C x H x W and N x C x H x W maps both work.
    ``d == 1`` returns the input unchanged.
    """
    if d not in RESOLUTION_FACTORS:
        raise ConfigError(f'Resolution factor must be one of {RESOLUTION_FACTORS}, got {d}')
    context_map = np.asarray(context_map, dtype=DTYPE)
    if d == 1:
        return context_map
    h, w = context_map.shape[-2:]
    if h % d or w % d:
        raise ShapeError(f'Resolution factor {d} does not divide {h}x{w}')
    lead = context_map.shape[:-2]
    pooled = context_map.reshape(*lead, h // d, d, w // d, d).mean(axis=(-3, -1))
    return freeze(np.repeat(np.repeat(pooled, d, axis=-2), d, axis=-1))


def rollup(source: ContextSource, hierarchy: Hierarchy, level: str) -> ContextSource:
    """Sums leaf probabilities into their ancestors at ``level``."""
    hierarchy.check_level(level)
    for category in source.categories:
        if category not in hierarchy.parents:
            raise VocabularyError(f'Category {category} is not a leaf of the hierarchy')
    if level == 'leaf' and source.categories == hierarchy.leaves:
        return source
    matrix = hierarchy.membership(source.categories, level)
    values = np.tensordot(matrix, source.values, axes=([1], [0]))
    return ContextSource(source.kind, tuple(hierarchy.nodes(level)), values, hierarchy.name)


def soften(one_hot: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-softened probabilities, softmax(one_hot / T) over axis 0."""
    if temperature <= 0.0:
        raise ConfigError(f'Temperature must be positive, got {temperature}')
    logits = np.asarray(one_hot, dtype=DTYPE) / temperature
    shifted = np.exp(logits - logits.max(axis=0, keepdims=True))
    return freeze(shifted / shifted.sum(axis=0, keepdims=True))


def stack_context(context, height: int, width: int) -> np.ndarray:
    """Network context tensor Cc x H x W from one or several sources, in order."""
    if isinstance(context, np.ndarray):
        if context.ndim != 3 or context.shape[1:] != (height, width):
            raise ContextError(f'Context array must be C x {height} x {width}, got {context.shape}')
        return context
    sources = [context] if isinstance(context, ContextSource) else list(context)
    if not sources:
        raise ContextError('No context source given')
    maps = []
    for source in sources:
        if source.kind == SCENE_WIDE:
            maps.append(broadcast(source, height, width))
        else:
            if source.values.shape[1:] != (height, width):
                raise ContextError(f'Per-pixel context of size {source.values.shape[1:]} does not match '
                                   f'the {height}x{width} image')
            maps.append(source.values)
    return freeze(np.concatenate(maps, axis=0))


def multiply_prior(probs: PredictionMap, prior: Union[np.ndarray, Sequence[float]],
                   return_fallbacks: bool = False):
    """Renormalised product of predictions and a material prior.

    Parameters
    ----------
    probs: PredictionMap
        Model output.
    prior: array_like
        One distribution over materials (length M) or one per pixel (M x H x W).
        Zero entries exclude a material outright.
    return_fallbacks: bool
        Also return how many pixels kept their original distribution because
        the product vanished there.

    Returns
    -------
    PredictionMap or (PredictionMap, int)
    """
    prior = np.asarray(prior, dtype=DTYPE)
    m, h, w = probs.probs.shape
    if prior.shape == (m,):
        prior = prior[:, None, None]
    elif prior.shape != (m, h, w):
        raise ContextError(f'Prior must have shape ({m},) or ({m}, {h}, {w}), got {prior.shape}')
    if np.any(prior < 0.0):
        raise ContextError('Prior holds negative entries')
    scale = prior.max(axis=0, keepdims=True)
    if np.any(scale == 0.0):
        raise ContextError('Prior sums to 0')
    # Scaling by the maximum keeps a uniform prior at exactly 1.
    product = probs.probs * (prior / scale)
    totals = product.sum(axis=0)
    vanished = totals == 0.0
    fallbacks = int(vanished.sum())
    if fallbacks:
        logger.warning('multiply_prior kept the original distribution at %d pixels', fallbacks)
        product = np.where(vanished[None], probs.probs, product)
        totals = product.sum(axis=0)
    result = PredictionMap(product / totals[None], argmax=product.argmax(axis=0))
    if return_fallbacks:
        return result, fallbacks
    return result


def misprediction_ratios(probs: PredictionMap, labels: LabelMap) -> np.ndarray:
    """p(predicted) / p(true) at labeled pixels the model gets wrong.

    Large ratios mean the error is too confident for a multiplicative prior
    to overturn it.
    """
    if (probs.height, probs.width) != (labels.height, labels.width):
        raise ShapeError('Prediction and labels differ in size')
    wrong = labels.mask & (probs.argmax != labels.labels)
    rows, cols = np.nonzero(wrong)
    predicted = probs.probs[probs.argmax[rows, cols], rows, cols]
    true = probs.probs[labels.labels[rows, cols], rows, cols]
    return predicted / np.maximum(true, np.finfo(DTYPE).tiny)
