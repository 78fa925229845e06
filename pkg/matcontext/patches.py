# This file is part of matcontext, local material recognition in global context.
"""Local material patches cut from labeled images."""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .maps import LabelMap
from .ops import UNLABELED


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Patch:
    image: np.ndarray
    labels: LabelMap
    material: int
    scene_id: int
    x: int
    y: int
    context: Optional[np.ndarray] = None

    @property
    def key(self):
        return self.scene_id, self.y, self.x


class PatchSet:
    """Patches kept in (scene, y, x) order whatever order they were added in."""

    def __init__(self, patches: Sequence[Patch] = ()) -> None:
        self.patches: List[Patch] = sorted(patches, key=lambda patch: patch.key)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[Patch]:
        return iter(self.patches)

    def __getitem__(self, index: int) -> Patch:
        return self.patches[index]

    def extend(self, other: 'PatchSet') -> 'PatchSet':
        return PatchSet(self.patches + other.patches)

    def sample(self, count: int, seed: int = 0) -> 'PatchSet':
        """A seeded subset of ``count`` patches, kept in key order."""
        if count >= len(self.patches):
            return PatchSet(self.patches)
        chosen = np.random.default_rng(seed).choice(len(self.patches), size=count, replace=False)
        return PatchSet([self.patches[i] for i in chosen])

    def images(self) -> np.ndarray:
        return np.stack([patch.image for patch in self.patches])

    def label_arrays(self) -> np.ndarray:
        return np.stack([patch.labels.labels for patch in self.patches])

    def contexts(self) -> Optional[np.ndarray]:
        if not self.patches or self.patches[0].context is None:
            return None
        return np.stack([patch.context for patch in self.patches])

    def material_counts(self, num_materials: int) -> np.ndarray:
        return np.bincount([patch.material for patch in self.patches], minlength=num_materials)


def valid_origins(labels: np.ndarray, size: int, stride: int, strict: bool = False) -> np.ndarray:
    """Boolean grid over window origins (rows: y / stride, columns: x / stride).

    A window is valid when its center pixel is labeled and every labeled pixel
    in it carries the center's material; strict mode also forbids unlabeled
    pixels.
    """
    windows = sliding_window_view(labels, (size, size))[::stride, ::stride]
    centers = windows[:, :, size // 2, size // 2]
    same = windows == centers[:, :, None, None]
    if not strict:
        same |= windows == UNLABELED
    return (centers != UNLABELED) & same.all(axis=(2, 3))


def extract_patches(image: np.ndarray, labels: LabelMap, size: int = 48, stride: int = 8, strict: bool = False,
                    scene_id: int = 0, context: Optional[np.ndarray] = None) -> PatchSet:
    """Cuts single-material patches from a 3 x H x W image.

    Pixels of a patch whose label differs from the patch material are
    unlabeled in its LabelMap. ``context`` (C x H x W) is cropped alongside.
    """
    if stride < 1:
        raise ConfigError(f'Patch stride must be positive, got {stride}')
    if image.shape[1:] != (labels.height, labels.width):
        raise ShapeError(f'Image of size {image.shape[1:]} and labels of size '
                         f'{(labels.height, labels.width)} differ')
    if size > min(labels.height, labels.width):
        raise ShapeError(f'Patch size {size} exceeds the {labels.height}x{labels.width} image')
    patches = []
    for row, col in zip(*np.nonzero(valid_origins(labels.labels, size, stride, strict))):
        y, x = int(row) * stride, int(col) * stride
        window = labels.labels[y:y + size, x:x + size]
        material = int(window[size // 2, size // 2])
        masked = np.where(window == material, window, UNLABELED)
        crop = None if context is None else context[:, y:y + size, x:x + size].copy()
        patches.append(Patch(image[:, y:y + size, x:x + size].copy(), LabelMap(masked), material,
                             scene_id, x, y, crop))
    return PatchSet(patches)


def patches_from_scenes(scenes: Sequence, size: int, stride: int, strict: bool = False,
                        contexts: Optional[Sequence[np.ndarray]] = None, limit: Optional[int] = None,
                        seed: int = 0) -> PatchSet:
    """Patches of several rendered scenes, optionally a seeded subset of ``limit`` of them."""
    result = []
    for i, scene in enumerate(scenes):
        context = None if contexts is None else contexts[i]
        result.extend(extract_patches(scene.image, scene.labels, size, stride, strict, scene.index, context))
    patches = PatchSet(result)
    if limit is not None:
        patches = patches.sample(limit, seed)
    if not len(patches):
        logger.warning('No valid %dx%d patch in %d scenes', size, size, len(scenes))
    else:
        logger.info('Extracted %d patches of %dx%d from %d scenes', len(patches), size, size, len(scenes))
    return patches
