# This file is part of matcontext, local material recognition in global context.
"""Material/context co-occurrence counts, conditional distributions and entropies."""
import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .context import Hierarchy
from .errors import ConfigError, VocabularyError


logger = logging.getLogger(__name__)


class CooccurrenceTable:
    """Counts of (material, context category) pairs, materials x contexts."""

    def __init__(self, materials: Sequence[str], contexts: Sequence[str], counts=None) -> None:
        self.materials = tuple(materials)
        self.contexts = tuple(contexts)
        shape = (len(self.materials), len(self.contexts))
        if counts is None:
            counts = np.zeros(shape, dtype=np.int64)
        counts = np.array(counts, dtype=np.int64)
        if counts.shape != shape:
            raise ConfigError(f'Counts of shape {counts.shape} do not match {shape[0]} materials '
                              f'and {shape[1]} contexts')
        if np.any(counts < 0):
            raise ConfigError('Co-occurrence counts must be nonnegative')
        self.counts = counts
        self._material_index = {name: i for i, name in enumerate(self.materials)}
        self._context_index = {name: i for i, name in enumerate(self.contexts)}

    def material_index(self, material: str) -> int:
        if material not in self._material_index:
            raise VocabularyError(f'Unknown material {material}')
        return self._material_index[material]

    def context_index(self, context: str) -> int:
        if context not in self._context_index:
            raise VocabularyError(f'Unknown context category {context}')
        return self._context_index[context]

    def add(self, material: str, context: str, count: int = 1) -> None:
        self.counts[self.material_index(material), self.context_index(context)] += count

    def add_indices(self, materials: np.ndarray, contexts: np.ndarray) -> None:
        """Tallies index arrays of equal shape in one pass."""
        materials = np.asarray(materials, dtype=np.int64).ravel()
        contexts = np.asarray(contexts, dtype=np.int64).ravel()
        m, c = self.counts.shape
        if materials.size and (materials.min() < 0 or materials.max() >= m):
            raise VocabularyError(f'Material index outside 0..{m - 1}')
        if contexts.size and (contexts.min() < 0 or contexts.max() >= c):
            raise VocabularyError(f'Context index outside 0..{c - 1}')
        flat = np.bincount(materials * c + contexts, minlength=m * c)
        self.counts += flat.reshape(m, c)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def marginal(self) -> np.ndarray:
        """Empirical context marginal p(c), the column-total fraction."""
        total = self.counts.sum()
        if total == 0:
            raise ConfigError('An empty table has no context marginal')
        return self.totals / total

    def material_marginal(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise ConfigError('An empty table has no material marginal')
        return self.counts.sum(axis=1) / total

    def conditional(self, context: str, alpha: float = 0.0) -> np.ndarray:
        """p(m | c) = (count(m, c) + alpha) / (total(c) + alpha |M|)."""
        if alpha < 0.0:
            raise ConfigError(f'Smoothing must be nonnegative, got {alpha}')
        column = self.counts[:, self.context_index(context)].astype(np.float64)
        total = column.sum()
        if total == 0 and alpha == 0.0:
            raise ConfigError(f'Context {context} has no counts; use smoothing to query it')
        return (column + alpha) / (total + alpha * len(self.materials))

    def merge_columns(self, groups: Mapping[str, Sequence[str]]) -> 'CooccurrenceTable':
        """Table over coarser contexts whose columns are sums of their members."""
        counts = np.zeros((len(self.materials), len(groups)), dtype=np.int64)
        for j, members in enumerate(groups.values()):
            for member in members:
                counts[:, j] += self.counts[:, self.context_index(member)]
        return CooccurrenceTable(self.materials, list(groups), counts)

    def save_csv(self, path: str) -> None:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['material'] + list(self.contexts))
            for name, row in zip(self.materials, self.counts):
                writer.writerow([name] + [int(v) for v in row])

    @classmethod
    def load_csv(cls, path: str) -> 'CooccurrenceTable':
        with open(path, newline='') as f:
            rows = [row for row in csv.reader(f) if row]
        if not rows:
            raise ConfigError(f'Co-occurrence file {path} is empty')
        contexts = rows[0][1:]
        try:
            counts = [[int(v) for v in row[1:]] for row in rows[1:]]
        except ValueError as error:
            raise ConfigError(f'Co-occurrence file {path} holds a non-integer count: {error}') from error
        return cls([row[0] for row in rows[1:]], contexts, counts if counts else None)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CooccurrenceTable) and self.materials == other.materials
                and self.contexts == other.contexts and np.array_equal(self.counts, other.counts))

    def __repr__(self) -> str:
        return f'CooccurrenceTable({len(self.materials)} materials x {len(self.contexts)} contexts, ' \
               f'{int(self.counts.sum())} pairs)'


def accumulate(pairs: Iterable[Tuple[str, str]], materials: Sequence[str],
               contexts: Sequence[str]) -> CooccurrenceTable:
    table = CooccurrenceTable(materials, contexts)
    for material, context in pairs:
        table.add(material, context)
    return table


def merge(tables: Sequence[CooccurrenceTable]) -> CooccurrenceTable:
    """Sums partial tables over the same vocabularies."""
    if not tables:
        raise ConfigError('merge needs at least one table')
    first = tables[0]
    counts = np.zeros_like(first.counts)
    for table in tables:
        if table.materials != first.materials or table.contexts != first.contexts:
            raise VocabularyError('Tables to merge have different vocabularies')
        counts += table.counts
    return CooccurrenceTable(first.materials, first.contexts, counts)


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    p = np.asarray(dist, dtype=np.float64)
    nonzero = p[p > 0.0]
    return float(-np.sum(nonzero * np.log(nonzero)))


@dataclass
class ConditionalReport:
    materials: List[str]
    contexts: List[str]
    distributions: Dict[str, List[float]]
    entropies: Dict[str, float]
    expected_entropy: float
    mean_entropy: float
    marginal_entropy: float
    information_gain: float
    uniform_entropy: float
    alpha: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            'materials': self.materials,
            'contexts': self.contexts,
            'alpha': self.alpha,
            'distributions': self.distributions,
            'entropies': self.entropies,
            'weights': self.weights,
            'expected_entropy': self.expected_entropy,
            'mean_entropy': self.mean_entropy,
            'marginal_entropy': self.marginal_entropy,
            'information_gain': self.information_gain,
            'uniform_entropy': self.uniform_entropy,
        }

    def save(self, path: str) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def report(table: CooccurrenceTable, alpha: float = 0.0) -> ConditionalReport:
    """Per-context distributions and entropies of a table.

    Contexts without counts are left out when ``alpha`` is 0. The expected
    entropy weighs contexts by the empirical marginal; the mean entropy is the
    unweighted average over the reported contexts.
    """
    weights = table.marginal()
    contexts, distributions, entropies, used = [], OrderedDict(), OrderedDict(), OrderedDict()
    for j, context in enumerate(table.contexts):
        if alpha == 0.0 and table.totals[j] == 0:
            continue
        dist = table.conditional(context, alpha)
        contexts.append(context)
        distributions[context] = [float(v) for v in dist]
        entropies[context] = entropy(dist)
        used[context] = float(weights[j])
    expected = float(sum(used[c] * entropies[c] for c in contexts))
    marginal_entropy = entropy(table.material_marginal())
    result = ConditionalReport(list(table.materials), contexts, dict(distributions), dict(entropies), expected,
                               float(np.mean(list(entropies.values()))), marginal_entropy,
                               marginal_entropy - expected, float(np.log(len(table.materials))), alpha, dict(used))
    logger.info('H(M)=%.4f H(M|C)=%.4f over %d contexts', marginal_entropy, expected, len(contexts))
    return result


def expected_conditional_entropy(table: CooccurrenceTable, marginal: Optional[np.ndarray] = None) -> float:
    """H(M|C) = sum_c p(c) H(M|C=c), unsmoothed."""
    weights = table.marginal() if marginal is None else np.asarray(marginal, dtype=np.float64)
    value = 0.0
    for j, context in enumerate(table.contexts):
        if weights[j] == 0.0 or table.totals[j] == 0:
            continue
        value += weights[j] * entropy(table.conditional(context))
    return float(value)


def level_groups(contexts: Sequence[str], hierarchy: Hierarchy, level: str) -> 'OrderedDict[str, List[str]]':
    """Leaf contexts grouped under their ancestors at a level."""
    groups: 'OrderedDict[str, List[str]]' = OrderedDict()
    for context in contexts:
        groups.setdefault(hierarchy.ancestor(context, level), []).append(context)
    return groups


def rollup_table(table: CooccurrenceTable, hierarchy: Hierarchy, level: str) -> CooccurrenceTable:
    return table.merge_columns(level_groups(table.contexts, hierarchy, level))


def granularity_study(table: CooccurrenceTable, hierarchy: Hierarchy,
                      marginal: Optional[np.ndarray] = None) -> 'OrderedDict[str, float]':
    """Expected conditional entropy at every hierarchy level, coarse to fine.

    Coarse tables merge leaf columns exactly. ``marginal`` is a distribution
    over the table's leaf contexts; by default the empirical one is used.
    """
    for context in table.contexts:
        if context not in hierarchy.parents:
            raise VocabularyError(f'Category {context} is not a leaf of the hierarchy')
    if marginal is not None:
        marginal = np.asarray(marginal, dtype=np.float64)
        if marginal.shape != (len(table.contexts),):
            raise ConfigError(f'Context marginal needs {len(table.contexts)} entries, got {marginal.shape}')
    result = OrderedDict()
    for level in hierarchy.levels:
        groups = level_groups(table.contexts, hierarchy, level)
        merged = table.merge_columns(groups)
        weights = None
        if marginal is not None:
            weights = np.array([sum(marginal[table.context_index(c)] for c in members)
                                for members in groups.values()])
        result[level] = expected_conditional_entropy(merged, weights)
        logger.debug('H(M|%s) = %.6f over %d nodes', level, result[level], len(groups))
    return result


def tally_scenes(scenes: Sequence, materials: Sequence[str], contexts: Sequence[str],
                 kind: str = 'object') -> CooccurrenceTable:
    """Pixel counts of material against object (per pixel) or place (per scene)."""
    table = CooccurrenceTable(materials, contexts)
    for scene in scenes:
        mask = scene.labels.mask
        labels = scene.labels.labels[mask]
        if kind == 'object':
            context = scene.objects[mask]
        elif kind == 'place':
            context = np.full(labels.shape, scene.place)
        else:
            raise ConfigError(f'Unknown tally kind {kind}; use object or place')
        table.add_indices(labels, context)
    return table


if __name__ == '__main__':
    demo = accumulate([('wood', 'table'), ('wood', 'table'), ('metal', 'car'), ('glass', 'car')],
                      ['wood', 'metal', 'glass'], ['table', 'car'])
    print(demo)
    print(json.dumps(report(demo).to_dict(), indent=2))
