# This file is part of matcontext, local material recognition in global context.
"""Synthetic world with known place, object and material tables.

Scenes are tilings of rectangular object regions. Each region draws one
material from p(material | object, place) and renders it with that
material's parametric texture. Materials listed as ambiguous pairs share
their texture, so only context can tell them apart, and the accuracy of
the Bayes-optimal classifier can be computed exactly from the tables.
"""
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .context import PER_PIXEL, SCENE_WIDE, ContextSource, Hierarchy, rollup, soften, stack_context
from .errors import ConfigError, EmptySplitError, ShapeError
from .maps import LabelMap
from .network import DOWNSAMPLING


logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')
ORACLE_MODES = ('none', 'place', 'object', 'both')
STRIPE_AMPLITUDE = 0.1


def probability(value) -> Fraction:
    """Exact probability from a JSON number or a fraction string such as '3/16'."""
    try:
        prob = Fraction(str(value))
    except (ValueError, ZeroDivisionError) as error:
        raise ConfigError(f'Invalid probability {value!r}') from error
    if prob < 0:
        raise ConfigError(f'Negative probability {value!r}')
    return prob


def check_mode(mode: str) -> None:
    if mode not in ORACLE_MODES:
        raise ConfigError(f'Unknown context mode {mode}; use one of {", ".join(ORACLE_MODES)}')


def _check_rows(name: str, rows, width: int, count: Optional[int] = None) -> None:
    if count is not None and len(rows) != count:
        raise ConfigError(f'{name} needs {count} rows, got {len(rows)}')
    for row in rows:
        if len(row) != width:
            raise ConfigError(f'{name} rows need {width} entries, got {len(row)}')
        if any(v < 0 for v in row) or sum(row) != 1:
            raise ConfigError(f'{name} row {[str(v) for v in row]} is not a distribution')


@dataclass(frozen=True)
class Texture:
    color: Tuple[float, float, float]
    noise: float
    frequency: float

    def render(self, rng: np.random.Generator, height: int, width: int, y0: int = 0, x0: int = 0) -> np.ndarray:
        """3 x height x width patch: base color, diagonal stripes and pixel noise."""
        ys, xs = np.mgrid[y0:y0 + height, x0:x0 + width]
        stripes = STRIPE_AMPLITUDE * np.cos(2.0 * np.pi * self.frequency * (xs + ys))
        base = np.asarray(self.color, dtype=np.float64)[:, None, None] + stripes[None]
        noise = self.noise * rng.standard_normal((3, height, width))
        return np.clip(base + noise, 0.0, 1.0)

    def to_dict(self) -> Dict:
        return {'color': list(self.color), 'noise': self.noise, 'frequency': self.frequency}


@dataclass
class WorldSpec:
    """Generator tables of a synthetic world.

    ``material_given_object`` is p(material | object); ``material_overrides``
    maps (object, place) index pairs to rows p(material | object, place) that
    replace it in that place. All probabilities are exact fractions.
    """
    places: List[str]
    objects: List[str]
    materials: List[str]
    place_prior: List[Fraction]
    object_given_place: List[List[Fraction]]
    material_given_object: List[List[Fraction]]
    textures: List[Texture]
    material_overrides: Dict[Tuple[int, int], List[Fraction]] = field(default_factory=dict)
    ambiguous_pairs: List[Tuple[int, int]] = field(default_factory=list)
    ambiguity_rate: Optional[Fraction] = None
    seed: int = 0
    min_region: int = 8
    temperature: float = 2.0

    @property
    def num_places(self) -> int:
        return len(self.places)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_materials(self) -> int:
        return len(self.materials)

    def validate(self) -> None:
        p, o, m = self.num_places, self.num_objects, self.num_materials
        if min(p, o, m) < 1:
            raise ConfigError('A world needs at least one place, one object and one material')
        _check_rows('place_prior', [self.place_prior], p)
        _check_rows('object_given_place', self.object_given_place, o, p)
        _check_rows('material_given_object', self.material_given_object, m, o)
        for (obj, place), row in self.material_overrides.items():
            if not (0 <= obj < o and 0 <= place < p):
                raise ConfigError(f'Material override for unknown object/place pair ({obj}, {place})')
            _check_rows(f'material override of {self.objects[obj]} in {self.places[place]}', [row], m)
        if len(self.textures) != m:
            raise ConfigError(f'{m} materials need {m} textures, got {len(self.textures)}')
        for a, b in self.ambiguous_pairs:
            if not (0 <= a < m and 0 <= b < m) or a == b:
                raise ConfigError(f'Invalid ambiguous pair ({a}, {b})')
            if self.textures[a] != self.textures[b]:
                raise ConfigError(f'Ambiguous materials {self.materials[a]} and {self.materials[b]} '
                                  f'have different textures')
        if self.min_region < 1 or self.temperature <= 0.0:
            raise ConfigError('min_region and temperature must be positive')
        if self.ambiguity_rate is not None and Fraction(self.ambiguity_rate) != self.ambiguity():
            raise ConfigError(f'Declared ambiguity rate {self.ambiguity_rate} differs from the '
                              f'{self.ambiguity()} the tables produce')

    def material_row(self, obj: int, place: int) -> List[Fraction]:
        return self.material_overrides.get((obj, place), self.material_given_object[obj])

    def joint(self):
        """Yields (place, object, material, probability) for every nonzero cell."""
        for p, pp in enumerate(self.place_prior):
            if pp == 0:
                continue
            for o, po in enumerate(self.object_given_place[p]):
                if po == 0:
                    continue
                for m, pm in enumerate(self.material_row(o, p)):
                    if pm != 0:
                        yield p, o, m, pp * po * pm

    def texture_classes(self) -> List[int]:
        """Materials with identical textures share a class, numbered by first member."""
        classes, seen = [], {}
        for texture in self.textures:
            classes.append(seen.setdefault(texture, len(seen)))
        return classes

    def ambiguous_materials(self) -> List[int]:
        return sorted({i for pair in self.ambiguous_pairs for i in pair})

    def ambiguity(self) -> Fraction:
        """Exact fraction of pixels whose material belongs to an ambiguous pair."""
        members = set(self.ambiguous_materials())
        return sum((prob for _, _, m, prob in self.joint() if m in members), Fraction(0))

    def material_given_object_marginal(self) -> List[List[Fraction]]:
        """p(material | object) with the place integrated out."""
        rows = [[Fraction(0)] * self.num_materials for _ in self.objects]
        totals = [Fraction(0)] * self.num_objects
        for _, o, m, prob in self.joint():
            rows[o][m] += prob
            totals[o] += prob
        return [[v / totals[o] if totals[o] else Fraction(0) for v in row] for o, row in enumerate(rows)]

    def to_dict(self) -> Dict:
        def named(row, names):
            return {name: str(v) for name, v in zip(names, row) if v != 0}

        overrides: Dict[str, Dict[str, Dict[str, str]]] = {}
        for (o, p), row in sorted(self.material_overrides.items()):
            overrides.setdefault(self.objects[o], {})[self.places[p]] = named(row, self.materials)
        return {
            'seed': self.seed,
            'places': self.places,
            'objects': self.objects,
            'materials': self.materials,
            'place_prior': named(self.place_prior, self.places),
            'object_given_place': {self.places[p]: named(row, self.objects)
                                   for p, row in enumerate(self.object_given_place)},
            'material_given_object': {self.objects[o]: named(row, self.materials)
                                      for o, row in enumerate(self.material_given_object)},
            'material_overrides': overrides,
            'textures': {name: t.to_dict() for name, t in zip(self.materials, self.textures)},
            'ambiguous_pairs': [[self.materials[a], self.materials[b]] for a, b in self.ambiguous_pairs],
            'ambiguity_rate': None if self.ambiguity_rate is None else str(self.ambiguity_rate),
            'min_region': self.min_region,
            'temperature': self.temperature,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'WorldSpec':
        try:
            places, objects, materials = list(data['places']), list(data['objects']), list(data['materials'])

            def row(table: Dict, names: List[str], owner: str) -> List[Fraction]:
                unknown = set(table) - set(names)
                if unknown:
                    raise ConfigError(f'Unknown categories {sorted(unknown)} in the row of {owner}')
                return [probability(table.get(name, 0)) for name in names]

            def rows(table: Dict, keys: List[str], names: List[str]) -> List[List[Fraction]]:
                unknown = set(table) - set(keys)
                if unknown:
                    raise ConfigError(f'Unknown categories {sorted(unknown)}')
                return [row(table.get(key, {}), names, key) for key in keys]

            overrides = {}
            for obj, per_place in data.get('material_overrides', {}).items():
                for place, table in per_place.items():
                    if obj not in objects or place not in places:
                        raise ConfigError(f'Material override for unknown object {obj} or place {place}')
                    overrides[(objects.index(obj), places.index(place))] = row(table, materials, f'{obj}/{place}')
            textures = []
            for name in materials:
                t = data['textures'][name]
                textures.append(Texture(tuple(float(c) for c in t['color']), float(t['noise']),
                                        float(t['frequency'])))
            pairs = [(materials.index(a), materials.index(b)) for a, b in data.get('ambiguous_pairs', [])]
            rate = data.get('ambiguity_rate')
            rate = None if rate is None else probability(rate)
            spec = cls(places, objects, materials,
                       row(data['place_prior'], places, 'place_prior'),
                       rows(data['object_given_place'], places, objects),
                       rows(data['material_given_object'], objects, materials),
                       textures, overrides, pairs, rate,
                       int(data.get('seed', 0)), int(data.get('min_region', 8)),
                       float(data.get('temperature', 2.0)))
        except KeyError as error:
            raise ConfigError(f'World spec is missing {error}') from error
        except ConfigError:
            raise
        except (TypeError, ValueError) as error:
            raise ConfigError(f'Malformed world spec: {error}') from error
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str) -> 'WorldSpec':
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as error:
                raise ConfigError(f'World spec {path} is not valid JSON: {error}') from error
        return cls.from_dict(data)

    def save(self, path: str) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)


def default_world() -> WorldSpec:
    """4 places, 8 objects, 8 materials, 2 ambiguous pairs, ambiguity rate 2/5."""
    return WorldSpec.load(os.path.join(DATA_DIR, 'default_world.json'))


def default_hierarchy() -> Hierarchy:
    return Hierarchy.load(os.path.join(DATA_DIR, 'default_hierarchy.json'))


def random_world(seed: int, num_places: int = 3, num_objects: int = 4, num_materials: int = 5,
                 ambiguous_pairs: int = 1, override_rate: float = 0.5) -> WorldSpec:
    """Random valid world with small integer weights turned into exact fractions."""
    if 2 * ambiguous_pairs > num_materials:
        raise ConfigError(f'{num_materials} materials cannot form {ambiguous_pairs} disjoint pairs')
    rng = np.random.default_rng(seed)

    def dist(size: int) -> List[Fraction]:
        weights = rng.integers(0, 5, size=size)
        weights[rng.integers(size)] += 1
        total = int(weights.sum())
        return [Fraction(int(w), total) for w in weights]

    textures = [Texture(tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3)), 0.05, float(rng.choice([0, 0.25, 0.5])))
                for _ in range(num_materials)]
    pairs = [(2 * i, 2 * i + 1) for i in range(ambiguous_pairs)]
    for a, b in pairs:
        textures[b] = textures[a]
    overrides = {(o, p): dist(num_materials)
                 for o in range(num_objects) for p in range(num_places) if rng.random() < override_rate}
    spec = WorldSpec([f'place{i}' for i in range(num_places)], [f'object{i}' for i in range(num_objects)],
                     [f'material{i}' for i in range(num_materials)], dist(num_places),
                     [dist(num_objects) for _ in range(num_places)],
                     [dist(num_materials) for _ in range(num_objects)], textures, overrides, pairs, seed=seed)
    spec.validate()
    spec.ambiguity_rate = spec.ambiguity()
    return spec


def _context_key(mode: str, place: int, obj: int, groups: Optional[Sequence[int]] = None) -> Tuple:
    check_mode(mode)
    if groups is not None:
        place = groups[place]
    if mode == 'none':
        return ()
    if mode == 'place':
        return (place,)
    if mode == 'object':
        return (obj,)
    return (place, obj)


def place_groups(spec: WorldSpec, hierarchy: Optional[Hierarchy], level: str = 'leaf') -> Optional[List[int]]:
    """Index of each place's ancestor at ``level``, or None for the leaf level."""
    if hierarchy is None or level == 'leaf':
        return None
    nodes = hierarchy.nodes(level)
    return [nodes.index(hierarchy.ancestor(place, level)) for place in spec.places]


def _posterior_mass(spec: WorldSpec, mode: str, groups: Optional[Sequence[int]]) -> Dict[Tuple, Dict[int, Fraction]]:
    classes = spec.texture_classes()
    mass: Dict[Tuple, Dict[int, Fraction]] = defaultdict(lambda: defaultdict(Fraction))
    for p, o, m, prob in spec.joint():
        mass[(_context_key(mode, p, o, groups), classes[m])][m] += prob
    return mass


def bayes_oracle(spec: WorldSpec, mode: str, hierarchy: Optional[Hierarchy] = None, level: str = 'leaf',
                 restrict_to: Optional[Sequence[int]] = None) -> Fraction:
    """Exact expected per-pixel accuracy of the MAP classifier.

    The classifier sees a pixel's texture class and the context selected by
    ``mode``; with a hierarchy, places are replaced by their ancestors at
    ``level``. With ``restrict_to``, the accuracy is conditioned on the true
    material being one of those indices.
    """
    groups = place_groups(spec, hierarchy, level)
    correct, total = Fraction(0), Fraction(0)
    for masses in _posterior_mass(spec, mode, groups).values():
        best = max(masses, key=lambda m: (masses[m], -m))
        if restrict_to is None:
            correct += masses[best]
        else:
            total += sum((v for m, v in masses.items() if m in restrict_to), Fraction(0))
            if best in restrict_to:
                correct += masses[best]
    if restrict_to is None:
        return correct
    if total == 0:
        raise ConfigError('No pixel carries the requested materials')
    return correct / total


def map_rule(spec: WorldSpec, mode: str, hierarchy: Optional[Hierarchy] = None, level: str = 'leaf') -> np.ndarray:
    """MAP decisions as a lookup table indexed [place, object, texture class].

    Ties go to the lowest material index; unreachable cells hold 0.
    """
    groups = place_groups(spec, hierarchy, level)
    mass = _posterior_mass(spec, mode, groups)
    num_classes = max(spec.texture_classes()) + 1
    rule = np.zeros((spec.num_places, spec.num_objects, num_classes), dtype=np.int64)
    for p in range(spec.num_places):
        for o in range(spec.num_objects):
            for t in range(num_classes):
                masses = mass.get((_context_key(mode, p, o, groups), t))
                if masses:
                    rule[p, o, t] = max(masses, key=lambda m: (masses[m], -m))
    return rule


def _cdf(rows) -> np.ndarray:
    """Cumulative rows, pinned to 1 from the last category with positive mass on.

    Zero-mass categories get empty intervals, so a draw in [0, 1) can only
    land on a category the row allows.
    """
    probs = np.asarray([[float(v) for v in row] for row in rows])
    cdf = np.cumsum(probs, axis=-1)
    size = probs.shape[-1]
    last = size - 1 - np.argmax(probs[..., ::-1] > 0.0, axis=-1)
    cdf[np.arange(size) >= last[..., None]] = 1.0
    return cdf


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
    return int(np.searchsorted(cdf, rng.random(), side='right'))


def sample_pixels(spec: WorldSpec, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Independent pixel draws of (place, object, material)."""
    rng = np.random.default_rng(seed)
    place_cdf = _cdf([spec.place_prior])[0]
    object_cdf = _cdf(spec.object_given_place)
    material_cdf = np.stack([_cdf([spec.material_row(o, p) for o in range(spec.num_objects)])
                             for p in range(spec.num_places)])
    places = np.searchsorted(place_cdf, rng.random(count), side='right')
    u = rng.random(count)
    objects = (u[:, None] >= object_cdf[places]).sum(axis=1)
    u = rng.random(count)
    materials = (u[:, None] >= material_cdf[places, objects]).sum(axis=1)
    return places, objects, materials


@dataclass
class Scene:
    index: int
    place: int
    objects: np.ndarray
    labels: LabelMap
    image: Optional[np.ndarray] = None
    regions: List[Tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.objects.shape[0]

    @property
    def width(self) -> int:
        return self.objects.shape[1]

    def place_one_hot(self, num_places: int) -> np.ndarray:
        return np.eye(num_places)[self.place]

    def object_one_hot(self, num_objects: int) -> np.ndarray:
        return (self.objects[None] == np.arange(num_objects)[:, None, None]).astype(np.float64)


def _tile(rng: np.random.Generator, y: int, x: int, h: int, w: int, min_region: int,
          depth: int = 0) -> List[Tuple[int, int, int, int]]:
    """Guillotine split of a rectangle into regions at least min_region on a side."""
    can_split_h = h >= 2 * min_region
    can_split_w = w >= 2 * min_region
    if depth >= 4 or not (can_split_h or can_split_w) or rng.random() < 0.2:
        return [(y, x, h, w)]
    vertical = can_split_w and (not can_split_h or rng.random() < 0.5)
    if vertical:
        cut = int(rng.integers(min_region, w - min_region + 1))
        return (_tile(rng, y, x, h, cut, min_region, depth + 1)
                + _tile(rng, y, x + cut, h, w - cut, min_region, depth + 1))
    cut = int(rng.integers(min_region, h - min_region + 1))
    return (_tile(rng, y, x, cut, w, min_region, depth + 1)
            + _tile(rng, y + cut, x, h - cut, w, min_region, depth + 1))


def generate_scene(spec: WorldSpec, index: int, size: int, seed: int, render: bool = True) -> Scene:
    rng = np.random.default_rng([seed, index])
    place = _draw(rng, _cdf([spec.place_prior])[0])
    object_cdf = _cdf([spec.object_given_place[place]])[0]
    regions = _tile(rng, 0, 0, size, size, spec.min_region)
    objects = np.zeros((size, size), dtype=np.int64)
    labels = np.zeros((size, size), dtype=np.int64)
    materials = []
    for y, x, h, w in regions:
        obj = _draw(rng, object_cdf)
        material = _draw(rng, _cdf([spec.material_row(obj, place)])[0])
        objects[y:y + h, x:x + w] = obj
        labels[y:y + h, x:x + w] = material
        materials.append(material)
    image = None
    if render:
        image = np.zeros((3, size, size))
        for (y, x, h, w), material in zip(regions, materials):
            image[:, y:y + h, x:x + w] = spec.textures[material].render(rng, h, w, y, x)
    objects.flags.writeable = False
    return Scene(index, place, objects, LabelMap(labels, spec.num_materials), image, regions)


def generate(spec: WorldSpec, count: int, size: int, seed: Optional[int] = None, render: bool = True,
             threads: int = 1) -> List[Scene]:
    """Scenes 0..count-1; scene i only depends on (seed, i)."""
    spec.validate()
    if size % DOWNSAMPLING:
        raise ShapeError(f'Scene size {size} is not divisible by {DOWNSAMPLING}')
    if size < spec.min_region:
        raise ShapeError(f'Scene size {size} is below the minimum region size {spec.min_region}')
    seed = spec.seed if seed is None else seed
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(lambda i: generate_scene(spec, i, size, seed, render), range(count)))
    else:
        scenes = [generate_scene(spec, i, size, seed, render) for i in range(count)]
    logger.info('Generated %d scenes of %dx%d with seed %d', count, size, size, seed)
    return scenes


def make_splits(scenes: Sequence[Scene], train_fraction: float = 0.8,
                seed: int = 0) -> Tuple[List[Scene], List[Scene], List[Scene]]:
    """Disjoint train/val/test lists; val and test share the remainder equally."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f'train_fraction must lie in (0, 1), got {train_fraction}')
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(len(scenes) * train_fraction))
    n_val = (len(scenes) - n_train) // 2
    splits = ([scenes[i] for i in order[:n_train]],
              [scenes[i] for i in order[n_train:n_train + n_val]],
              [scenes[i] for i in order[n_train + n_val:]])
    for name, split in zip(('train', 'val', 'test'), splits):
        if not split:
            raise EmptySplitError(f'The {name} split of {len(scenes)} scenes at {train_fraction} is empty')
    return splits


def context_channels(spec: WorldSpec, mode: str, hierarchy: Optional[Hierarchy] = None, level: str = 'leaf') -> int:
    check_mode(mode)
    places = len(hierarchy.nodes(level)) if hierarchy is not None and level != 'leaf' else spec.num_places
    return {'none': 0, 'place': places, 'object': spec.num_objects, 'both': places + spec.num_objects}[mode]


def scene_sources(scene: Scene, spec: WorldSpec, noisy: bool = True) -> List[ContextSource]:
    """Place and object sources of a scene, as external recognisers would report them.

    Noisy sources soften the true one-hot values with the world's
    temperature.
    """
    places = scene.place_one_hot(spec.num_places)
    objects = scene.object_one_hot(spec.num_objects)
    if noisy:
        places, objects = soften(places, spec.temperature), soften(objects, spec.temperature)
    return [ContextSource(SCENE_WIDE, tuple(spec.places), places),
            ContextSource(PER_PIXEL, tuple(spec.objects), objects)]


def scene_context(scene: Scene, spec: WorldSpec, mode: str, noisy: bool = True,
                  hierarchy: Optional[Hierarchy] = None, level: str = 'leaf') -> Optional[np.ndarray]:
    """Context tensor for a scene: places (broadcast) then objects (per pixel)."""
    check_mode(mode)
    if mode == 'none':
        return None
    place, obj = scene_sources(scene, spec, noisy)
    sources = []
    if mode in ('place', 'both'):
        sources.append(place if hierarchy is None else rollup(place, hierarchy, level))
    if mode in ('object', 'both'):
        sources.append(obj)
    return stack_context(sources, scene.height, scene.width)


if __name__ == '__main__':
    world = default_world()
    for oracle_mode in ORACLE_MODES:
        value = bayes_oracle(world, oracle_mode)
        print(f'{oracle_mode:7s} {str(value):7s} {float(value):.4f}')
