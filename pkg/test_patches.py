# This file is part of matcontext, local material recognition in global context.

import unittest

import numpy as np
from numpy.testing import assert_array_equal

from matcontext.errors import ConfigError, ShapeError
from matcontext.maps import LabelMap
from matcontext.ops import UNLABELED
from matcontext.patches import PatchSet, extract_patches, patches_from_scenes, valid_origins
from matcontext.world import Scene, default_world, generate


def halves(size=16):
    """Material 0 on the left half, material 1 on the right."""
    labels = np.zeros((size, size), dtype=np.int64)
    labels[:, size // 2:] = 1
    return labels


class TestValidOrigins(unittest.TestCase):

    def test_windows_crossing_a_boundary(self):
        grid = valid_origins(halves(), 8, 4)
        self.assertEqual(grid.shape, (3, 3))
        assert_array_equal(grid, [[True, False, True]] * 3)

    def test_unlabeled_pixels(self):
        labels = halves()
        labels[0, 0] = UNLABELED
        self.assertTrue(valid_origins(labels, 8, 4)[0, 0])
        self.assertFalse(valid_origins(labels, 8, 4, strict=True)[0, 0])
        labels[4, 4] = UNLABELED
        self.assertFalse(valid_origins(labels, 8, 4)[0, 0])


class TestExtractPatches(unittest.TestCase):

    def test_patches(self):
        labels = halves()
        labels[2, 2] = UNLABELED
        image = np.random.default_rng(0).uniform(size=(3, 16, 16))
        context = np.arange(2 * 16 * 16, dtype=float).reshape(2, 16, 16)
        patches = extract_patches(image, LabelMap(labels), size=8, stride=4, scene_id=7, context=context)
        self.assertEqual(len(patches), 6)
        self.assertEqual([p.material for p in patches], [0, 1, 0, 1, 0, 1])
        first = patches[0]
        self.assertEqual(first.key, (7, 0, 0))
        assert_array_equal(first.image, image[:, :8, :8])
        assert_array_equal(first.context, context[:, :8, :8])
        self.assertEqual(first.labels.labeled_count(), 63)
        self.assertEqual(patches[1].key, (7, 0, 8))
        assert_array_equal(patches.material_counts(3), [3, 3, 0])
        self.assertEqual(patches.images().shape, (6, 3, 8, 8))
        self.assertEqual(patches.contexts().shape, (6, 2, 8, 8))

    def test_strict_split(self):
        labels = np.zeros((32, 48), dtype=np.int64)
        labels[:, 24:] = 1
        labels[0, 30] = UNLABELED
        image = np.zeros((3, 32, 48))
        loose = valid_origins(labels, 16, 8)
        strict = valid_origins(labels, 16, 8, strict=True)
        assert_array_equal(loose, [[True, True, False, True, True]] * 3)
        assert_array_equal(strict, [[True, True, False, False, True]] + [[True, True, False, True, True]] * 2)
        patches = extract_patches(image, LabelMap(labels), 16, 8, strict=True)
        self.assertEqual(len(patches), 11)
        assert_array_equal(patches.material_counts(2), [6, 5])
        for patch in patches:
            self.assertEqual(patch.labels.labeled_count(), 256)
            self.assertEqual(patch.material, 0 if patch.x + 16 <= 24 else 1)
        self.assertEqual(len(extract_patches(image, LabelMap(labels), 16, 8)), 12)

    def test_errors(self):
        labels = LabelMap(halves())
        image = np.zeros((3, 16, 16))
        with self.assertRaises(ConfigError):
            extract_patches(image, labels, 8, stride=0)
        with self.assertRaises(ShapeError):
            extract_patches(image, labels, 32)
        with self.assertRaises(ShapeError):
            extract_patches(np.zeros((3, 8, 16)), labels, 8)

    def test_patch_set_order(self):
        labels = LabelMap(halves())
        image = np.zeros((3, 16, 16))
        first = extract_patches(image, labels, 8, 8, scene_id=2)
        second = extract_patches(image, labels, 8, 8, scene_id=1)
        merged = first.extend(second)
        self.assertEqual([p.key for p in merged][:2], [(1, 0, 0), (1, 0, 8)])
        self.assertEqual([p.key for p in PatchSet(reversed(list(merged)))], [p.key for p in merged])
        self.assertIsNone(merged.contexts())
        self.assertEqual(len(merged.sample(3)), 3)
        self.assertEqual(len(merged.sample(100)), len(merged))


class TestPatchesFromScenes(unittest.TestCase):

    def test_limit(self):
        scenes = generate(default_world(), 4, 16, seed=0)
        everything = patches_from_scenes(scenes, 8, 4)
        self.assertEqual(len(everything), 36)
        keys = [p.key for p in everything]
        limited = patches_from_scenes(scenes, 8, 4, limit=18, seed=3)
        chosen = [p.key for p in limited]
        self.assertEqual(len(chosen), 18)
        self.assertEqual(chosen, sorted(chosen))
        self.assertTrue(set(chosen) <= set(keys))
        self.assertGreater(len({key[0] for key in chosen}), 2)
        self.assertEqual(chosen, [p.key for p in patches_from_scenes(scenes, 8, 4, limit=18, seed=3)])
        self.assertNotEqual(chosen, keys[:18])

    def test_no_valid_patch_warns(self):
        labels = LabelMap(np.full((8, 8), UNLABELED))
        scene = Scene(0, 0, np.zeros((8, 8), dtype=np.int64), labels, np.zeros((3, 8, 8)))
        with self.assertLogs('matcontext.patches', level='WARNING'):
            self.assertEqual(len(patches_from_scenes([scene], 8, 4)), 0)


if __name__ == '__main__':
    unittest.main()
