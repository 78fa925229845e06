# This file is part of matcontext, local material recognition in global context.

import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from matcontext.context import ContextSource, PER_PIXEL, SCENE_WIDE
from matcontext.errors import ConfigError, ContextError, EmptyLabelError, ShapeError, UnknownLayerError
from matcontext.maps import LabelMap, PredictionMap, masked_loss
from matcontext.network import (INJECTION_LAYERS, NetworkConfig, bilinear_kernel, build_network, network_feeds,
                                predict, predict_batch)
from matcontext.ops import UNLABELED
from matcontext.training import Examples, OptimizerConfig, train


MICRO = {'stage_widths': [2, 3, 3, 3], 'head_width': 4}


class TestNetworkConfig(unittest.TestCase):

    def test_unknown_layer_lists_valid_names(self):
        with self.assertRaisesRegex(UnknownLayerError, 'pool1, pool2, conv3_3, conv4_3, upsampling'):
            build_network(NetworkConfig(injection_layer='fc7'))

    def test_invalid_values(self):
        for bad in ({'num_materials': 1}, {'patch_size': 30}, {'upsample_kernel': 3}, {'skip_mode': 'sum'},
                    {'stage_widths': [8, 8]}, {'activation': 'sigmoid'}):
            with self.assertRaises(ConfigError):
                NetworkConfig(**bad).validate()

    def test_from_dict_rejects_unknown_keys(self):
        with self.assertRaisesRegex(ConfigError, 'dropout'):
            NetworkConfig.from_dict({'dropout': 0.5})
        config = NetworkConfig(num_materials=4, context_channels=3, injection_layer='pool1')
        self.assertEqual(NetworkConfig.from_dict(config.to_dict()), config)

    def test_unknown_layer_is_a_config_error(self):
        self.assertTrue(issubclass(UnknownLayerError, ConfigError))


class TestBuildNetwork(unittest.TestCase):

    def test_output_shape_without_context(self):
        graph = build_network(NetworkConfig())
        probs = predict_batch(graph, np.random.default_rng(0).uniform(size=(1, 3, 48, 48)))
        self.assertEqual(probs.shape, (1, 16, 48, 48))
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_upsampling_injection_structure(self):
        graph = build_network(NetworkConfig(context_channels=5, injection_layer='upsampling', **MICRO))
        injections = [node for node in graph.operations('concat_channels') if node.name.startswith('inject_')]
        self.assertEqual([node.name for node in injections], ['inject_upsampling'])
        feeds = network_feeds(graph, np.zeros((1, 3, 48, 48)), context=np.full((1, 5, 48, 48), 0.2))
        run = graph.forward(feeds, until=injections[0].index)
        self.assertEqual(run[injections[0].inputs[1]].shape, (1, 5, 48, 48))

    def test_pool2_injection_extent(self):
        graph = build_network(NetworkConfig(context_channels=5, injection_layer='pool2', **MICRO))
        node = graph.node('inject_pool2')
        feeds = network_feeds(graph, np.zeros((1, 3, 48, 48)), context=np.full((1, 5, 48, 48), 0.2))
        run = graph.forward(feeds, until=node.index)
        self.assertEqual(run[node.index].shape, (1, 3 + 5, 12, 12))
        self.assertEqual(run[node.inputs[1]].shape, (1, 5, 12, 12))

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from([8, 16, 48]), st.sampled_from(INJECTION_LAYERS), st.sampled_from(['raw', 'learned', 'none']))
    def test_output_resolution_matches_input(self, size, layer, skip_mode):
        config = NetworkConfig(num_materials=3, context_channels=2, injection_layer=layer, skip_mode=skip_mode,
                               patch_size=size, **MICRO)
        graph = build_network(config)
        context = np.full((2, 2, size, size), 0.5)
        probs = predict_batch(graph, np.zeros((2, 3, size, size)), context)
        self.assertEqual(probs.shape, (2, 3, size, size))

    def test_learned_skip_adds_parameters(self):
        raw = build_network(NetworkConfig(**MICRO))
        learned = build_network(NetworkConfig(skip_mode='learned', **MICRO))
        self.assertEqual(set(learned.parameters) - set(raw.parameters), {'skip.weight', 'skip.bias'})

    def test_skip_mode_none_drops_the_skip(self):
        with self.assertRaisesRegex(ConfigError, 'skip_connection'):
            NetworkConfig.from_dict({'skip_connection': False})
        raw = build_network(NetworkConfig(**MICRO))
        plain = build_network(NetworkConfig(skip_mode='none', **MICRO))
        self.assertEqual([node.name for node in raw.operations('concat_channels')], ['skip_concat'])
        self.assertEqual(plain.operations('concat_channels'), [])

    def test_bilinear_kernel(self):
        assert_array_equal(bilinear_kernel(2, 2, 2, 2)[0, 0], np.ones((2, 2)))
        assert_array_equal(bilinear_kernel(2, 2, 2, 2)[0, 1], np.zeros((2, 2)))
        assert_allclose(bilinear_kernel(1, 1, 4, 2)[0, 0, 1], [0.1875, 0.5625, 0.5625, 0.1875])

    def test_same_seed_same_parameters(self):
        first = build_network(NetworkConfig(seed=3, **MICRO))
        second = build_network(NetworkConfig(seed=3, **MICRO))
        for name in first.parameters:
            assert_array_equal(first.parameters[name], second.parameters[name])


class TestPredict(unittest.TestCase):

    def test_zero_classifier_is_uniform(self):
        graph = build_network(NetworkConfig(zero_init_classifier=True, **MICRO))
        prediction = predict(graph, np.random.default_rng(1).uniform(size=(3, 16, 16)))
        assert_allclose(prediction.probs, 1.0 / 16, rtol=0, atol=1e-12)

    def test_argmax_consistent(self):
        graph = build_network(NetworkConfig(num_materials=5, **MICRO))
        prediction = predict(graph, np.random.default_rng(2).uniform(size=(3, 16, 16)))
        assert_array_equal(prediction.argmax, prediction.probs.argmax(axis=0))

    def test_context_sources(self):
        graph = build_network(NetworkConfig(num_materials=4, context_channels=5, injection_layer='conv3_3', **MICRO))
        image = np.random.default_rng(3).uniform(size=(3, 8, 8))
        place = ContextSource(SCENE_WIDE, ('a', 'b'), np.array([0.25, 0.75]))
        objects = ContextSource(PER_PIXEL, ('x', 'y', 'z'), np.full((3, 8, 8), 1.0 / 3))
        prediction = predict(graph, image, [place, objects])
        self.assertEqual((prediction.height, prediction.width), (8, 8))
        stacked = np.concatenate([np.broadcast_to(np.array([0.25, 0.75])[:, None, None], (2, 8, 8)),
                                  np.full((3, 8, 8), 1.0 / 3)])
        assert_array_equal(predict(graph, image, stacked).probs, prediction.probs)

    def test_context_errors(self):
        plain = build_network(NetworkConfig(**MICRO))
        with_context = build_network(NetworkConfig(context_channels=2, **MICRO))
        image = np.zeros((3, 8, 8))
        with self.assertRaises(ContextError):
            predict(plain, image, np.full((2, 8, 8), 0.5))
        with self.assertRaises(ContextError):
            predict(with_context, image)
        with self.assertRaises(ContextError):
            predict(with_context, image, np.full((3, 8, 8), 1.0 / 3))

    def test_trained_net_relies_on_its_context(self):
        """Images are blank, so only the context channel can tell the two materials apart."""
        rng = np.random.default_rng(5)
        materials = rng.integers(0, 2, size=40)
        images = np.full((40, 3, 8, 8), 0.5)
        labels = np.broadcast_to(materials[:, None, None], (40, 8, 8)).copy()
        contexts = np.zeros((40, 2, 8, 8))
        contexts[np.arange(40), materials] = 1.0
        graph = build_network(NetworkConfig(num_materials=2, context_channels=2, patch_size=8, **MICRO))
        result = train(graph, Examples(images, labels, contexts), OptimizerConfig(lr=0.05, epochs=40, batch_size=8))
        self.assertLess(result.final_loss, result.initial_loss)
        informed = predict_batch(graph, images, contexts, result.parameters)
        uniform = predict_batch(graph, images, np.full((40, 2, 8, 8), 0.5), result.parameters)
        assert_allclose(uniform, uniform[:1] * np.ones((40, 1, 1, 1)), rtol=0, atol=1e-12)
        self.assertGreater(np.abs(informed - uniform).max(), 0.05)
        truth = (np.arange(2)[None, :, None, None] == labels[:, None]).astype(float)
        self.assertGreater((informed * truth).sum(axis=1).mean(), (uniform * truth).sum(axis=1).mean())

    def test_extent_must_be_divisible(self):
        graph = build_network(NetworkConfig(**MICRO))
        with self.assertRaises(ShapeError):
            predict(graph, np.zeros((3, 10, 12)))


class TestMaps(unittest.TestCase):

    def test_uniform_loss_is_log_sixteen(self):
        probs = PredictionMap(np.full((16, 2, 2), 1.0 / 16))
        labels = LabelMap([[3, UNLABELED], [UNLABELED, UNLABELED]])
        self.assertAlmostEqual(masked_loss(probs, labels), np.log(16), places=12)
        self.assertAlmostEqual(masked_loss(probs, labels), 2.7726, delta=5e-5)

    def test_perfect_prediction(self):
        labels = np.array([[0, 1], [2, UNLABELED]])
        probs = np.zeros((3, 2, 2))
        for (i, j), label in np.ndenumerate(labels):
            probs[label if label != UNLABELED else 0, i, j] = 1.0
        self.assertLessEqual(masked_loss(PredictionMap(probs), LabelMap(labels)), 1e-9)

    def test_unlabeled_pixels_do_not_count(self):
        rng = np.random.default_rng(4)
        labels = LabelMap([[0, UNLABELED], [1, UNLABELED]])
        probs = rng.dirichlet(np.ones(3), size=(2, 2)).transpose(2, 0, 1)
        changed = probs.copy()
        changed[:, :, 1] = rng.dirichlet(np.ones(3), size=2).T
        self.assertEqual(masked_loss(PredictionMap(probs), labels), masked_loss(PredictionMap(changed), labels))

    def test_no_labeled_pixel(self):
        with self.assertRaises(EmptyLabelError):
            masked_loss(PredictionMap(np.full((2, 2, 2), 0.5)), LabelMap.unlabeled(2, 2))

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            masked_loss(PredictionMap(np.full((2, 2, 2), 0.5)), LabelMap(np.zeros((3, 2))))

    def test_prediction_map_validation(self):
        with self.assertRaises(ValueError):
            PredictionMap(np.full((2, 2, 2), 0.4))
        probs = np.stack([np.full((2, 2), 0.7), np.full((2, 2), 0.3)])
        with self.assertRaises(ValueError):
            PredictionMap(probs, argmax=np.ones((2, 2)))
        assert_array_equal(PredictionMap(probs, argmax=np.zeros((2, 2))).argmax, 0)

    def test_label_map_validation(self):
        with self.assertRaises(ShapeError):
            LabelMap([[0, -2]])
        with self.assertRaises(ShapeError):
            LabelMap([[0, 4]], num_materials=4)
        labels = LabelMap([[0, UNLABELED, 2]])
        self.assertEqual(labels.labeled_count(), 2)
        assert_array_equal(labels.mask, [[True, False, True]])


if __name__ == '__main__':
    unittest.main()
