# This file is part of matcontext, local material recognition in global context.

import json
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose

from matcontext.errors import ConfigError, InvariantViolation, VocabularyError
from matcontext.experiments import (Cell, ExperimentConfig, cell_contexts, cell_seed, external_contexts, material_prior,
                                    prepare, run_experiment)
from matcontext.world import default_world, generate_scene, scene_sources


def small_config(**overrides):
    """Seconds-sized benchmark: ten 16x16 scenes, one epoch, one repeat."""
    values = dict(scenes=10, scene_size=16, patch_size=8, stride=8, max_patches=40,
                  network={'stage_widths': [2, 2, 2, 2], 'head_width': 4},
                  optimizer={'lr': 0.01, 'epochs': 1, 'batch_size': 8}, repeats=1,
                  injection_layers=['pool1', 'upsampling'], resolution_factors=[1, 2], assertions=False)
    values.update(overrides)
    return ExperimentConfig.from_dict(values)


class TestExperimentConfig(unittest.TestCase):

    def test_rejected(self):
        with self.assertRaisesRegex(ConfigError, 'epochz'):
            ExperimentConfig.from_dict({'epochz': 3})
        for bad in ({'repeats': 0}, {'scenes': 2}, {'prior_source': 'scene'}, {'confident_threshold': 0.0},
                    {'resolution_mode': 'none'}, {'injection_layer': 'fc7'}, {'optimizer': {'lr': -1.0}}):
            with self.assertRaises(ConfigError):
                ExperimentConfig.from_dict(bad)

    def test_dict_form(self):
        config = small_config()
        self.assertEqual(ExperimentConfig.from_dict(config.to_dict()), config)
        self.assertEqual(config.network_config(8, 12, 'pool2', 3).context_channels, 12)


class TestBenchmark(unittest.TestCase):

    def test_cell_seeds(self):
        self.assertEqual(cell_seed(0, 1, 2), cell_seed(0, 1, 2))
        self.assertNotEqual(cell_seed(0, 1, 2), cell_seed(0, 2, 1))

    def test_prepare_is_deterministic(self):
        first, second = prepare(small_config(), 3), prepare(small_config(), 3)
        self.assertEqual([s.index for s in first.test], [s.index for s in second.test])
        self.assertEqual((len(first.train), len(first.val), len(first.test)), (8, 1, 1))

    def test_cell_contexts(self):
        bench = prepare(small_config(), 0)
        self.assertIsNone(cell_contexts(bench, bench.test, Cell(0, 'none', 'None', 'none', 'upsampling'), True))
        coarse = cell_contexts(bench, bench.test, Cell(0, 'mid', 'mid', 'place', 'upsampling', level='mid'), True)
        self.assertEqual(coarse[0].shape, (2, 16, 16))
        top = cell_contexts(bench, bench.test, Cell(0, 'high', 'high', 'place', 'upsampling', level='high'), True)
        assert_allclose(top[0], np.ones((1, 16, 16)))
        degraded = cell_contexts(bench, bench.test, Cell(0, 'd16', '1/16', 'object', 'upsampling', resolution=16), True)
        assert_allclose(degraded[0], degraded[0][:, :1, :1] * np.ones((1, 16, 16)))

    def test_external_contexts_match_generated_ones(self):
        bench = prepare(small_config(), 0)
        scene = bench.test[0]
        sources = scene_sources(scene, bench.spec)
        for cell in (Cell(0, 'mid', 'mid', 'place', 'upsampling', level='mid'),
                     Cell(0, 'both', 'both', 'both', 'upsampling'),
                     Cell(0, 'd2', '1/2', 'object', 'upsampling', resolution=2)):
            with self.subTest(cell=cell.name):
                assert_allclose(external_contexts(bench, cell, sources, 16, 16),
                                cell_contexts(bench, [scene], cell, True)[0], rtol=0, atol=1e-12)
        none = Cell(0, 'none', 'None', 'none', 'upsampling')
        self.assertIsNone(external_contexts(bench, none, sources, 16, 16))
        with self.assertRaisesRegex(VocabularyError, 'per_pixel'):
            external_contexts(bench, Cell(0, 'object', 'object', 'object', 'upsampling'), sources[:1], 16, 16)

    def test_material_priors_are_distributions(self):
        spec = default_world()
        scene = generate_scene(spec, 0, 16, seed=0, render=False)
        for source in ('object', 'place', 'both'):
            with self.subTest(source=source):
                prior = material_prior(spec, scene, source)
                self.assertEqual(prior.shape, (8, 16, 16))
                assert_allclose(prior.sum(axis=0), 1.0, atol=1e-12)


class TestExperiments(unittest.TestCase):

    def test_ablation_writes_reports(self):
        with tempfile.TemporaryDirectory() as out:
            result = run_experiment('ablation', small_config(), 0, out)
            directory = os.path.join(out, 'ablation')
            self.assertEqual(sorted(os.listdir(directory)),
                             ['both_repeat0.json', 'none_repeat0.json', 'object_repeat0.json',
                              'place_repeat0.json', 'summary.json', 'summary.md'])
            with open(os.path.join(directory, 'summary.json')) as f:
                summary = json.load(f)
        self.assertTrue(result.passed)
        self.assertEqual([row['label'] for row in result.rows],
                         ['None', 'Only Places', 'Only Objects', 'Places + Objects'])
        self.assertEqual([row['oracle_exact'] for row in summary['rows']], ['4/5', '22/25', '9/10', '49/50'])
        self.assertIn('| Places + Objects |', result.markdown())

    def test_same_seed_same_report_bytes(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            run_experiment('ablation', small_config(), 2, first)
            run_experiment('ablation', small_config(), 2, second)
            names = sorted(os.listdir(os.path.join(first, 'ablation')))
            self.assertEqual(names, sorted(os.listdir(os.path.join(second, 'ablation'))))
            for name in names:
                with open(os.path.join(first, 'ablation', name), 'rb') as f, \
                        open(os.path.join(second, 'ablation', name), 'rb') as g:
                    self.assertEqual(f.read(), g.read(), name)

    def test_same_seed_same_rows_with_threads(self):
        serial = run_experiment('resolution', small_config(), 1)
        parallel = run_experiment('resolution', small_config(threads=2), 1)
        self.assertEqual([row['cell'] for row in serial.rows], ['d1', 'd2'])
        self.assertEqual([row['accuracy'] for row in serial.rows], [row['accuracy'] for row in parallel.rows])

    def test_granularity(self):
        result = run_experiment('granularity', small_config(), 0)
        self.assertEqual([row['level'] for row in result.rows], ['high', 'mid', 'low', 'leaf'])
        entropies = [row['expected_entropy'] for row in result.rows]
        self.assertTrue(all(fine <= coarse + 1e-12 for coarse, fine in zip(entropies, entropies[1:])))
        self.assertEqual([row['oracle_exact'] for row in result.rows], ['4/5', '41/50', '17/20', '22/25'])

    def test_injection(self):
        result = run_experiment('injection', small_config(), 0)
        self.assertEqual([row['injection_layer'] for row in result.rows], ['pool1', 'upsampling'])
        self.assertEqual(len(result.checks), 1)

    def test_multiply_prior(self):
        result = run_experiment('multiply-prior', small_config(), 0)
        (study,) = result.extra['studies']
        self.assertGreaterEqual(study['confident_mistakes'], 0)
        if study['confident_mistakes']:
            self.assertTrue(0.0 <= study['fixed_by_prior'] <= 1.0)

    def test_checks_are_enforced_by_default(self):
        self.assertTrue(ExperimentConfig().assertions)
        strict = small_config(assertions=True, thresholds={'resolution_spread': -1.0})
        with tempfile.TemporaryDirectory() as out:
            with self.assertRaisesRegex(InvariantViolation, 'accuracy insensitive to context resolution'):
                run_experiment('resolution', strict, 0, out)
            self.assertTrue(os.path.exists(os.path.join(out, 'resolution', 'summary.json')))

    def test_resolution_cells_share_their_seeds(self):
        result = run_experiment('resolution', small_config(), 0)
        self.assertEqual(len({run.seed for run in result.runs}), 1)

    def test_no_confident_mistakes_passes(self):
        config = small_config(assertions=True, confident_threshold=1.0)
        result = run_experiment('multiply-prior', config, 0)
        (study,) = result.extra['studies']
        self.assertEqual(study['confident_mistakes'], 0)
        self.assertIn('confident mistakes to fix', [check['name'] for check in result.checks])
        self.assertTrue(result.passed)

    def test_unknown_experiment(self):
        with self.assertRaises(ConfigError):
            run_experiment('scaling', small_config(), 0)


if __name__ == '__main__':
    unittest.main()
