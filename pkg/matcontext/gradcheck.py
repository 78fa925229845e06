# This file is part of matcontext, local material recognition in global context.
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .graph import Graph, backward
from .network import NetworkConfig, build_network, network_feeds
from .ops import (UNLABELED, AvgPool, ConcatChannels, Conv2d, ConvTranspose2d, Dot, MaskedCrossEntropy, MaxPool2,
                  Relu, SoftmaxChannel, Tanh)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        status = 'ok' if self.passed else 'FAILED'
        return f'{self.op_name}: max relative error {self.max_relative_error:.3e} (tolerance {self.tolerance:.0e}) {status}'


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denominator


def gradcheck(graph: Graph, feeds: Mapping[str, np.ndarray], loss: int, epsilon: float = 1e-5,
              tolerance: float = 1e-5, parameters: Optional[Mapping[str, np.ndarray]] = None) -> List[GradReport]:
    """Compares ``backward`` against central finite differences.

    Every element of every trainable parameter is perturbed by +/- epsilon
    and the loss re-evaluated; one report is produced per parameter.

    Parameters
    ----------
    graph: Graph
        Graph holding the parameters to check.
    feeds: Mapping[str, np.ndarray]
        Input values for the forward passes.
    loss: int
        Index of the scalar loss node.
    epsilon: float
        Perturbation, in (0, 1e-2].
    tolerance: float
        Largest accepted relative error.
    parameters: Mapping[str, np.ndarray], optional
        Point at which to check; defaults to the graph's stored values.

    Returns
    -------
    List[GradReport]
        One report per trainable parameter, in graph order.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f'gradcheck epsilon must lie in (0, 1e-2], got {epsilon}')
    point = dict(graph.parameters)
    if parameters:
        point.update(parameters)
    analytic = backward(graph, graph.forward(feeds, point, until=loss), loss)
    reports = []
    for name, grad in analytic.items():
        theta = np.array(point[name])
        numeric = np.zeros(theta.shape)
        for i in range(theta.size):
            original = theta.flat[i]
            theta.flat[i] = original + epsilon
            plus = float(graph.forward(feeds, {**point, name: theta}, until=loss)[loss])
            theta.flat[i] = original - epsilon
            minus = float(graph.forward(feeds, {**point, name: theta}, until=loss)[loss])
            theta.flat[i] = original
            numeric.flat[i] = (plus - minus) / (2.0 * epsilon)
        error = float(relative_error(grad, numeric).max()) if grad.size else 0.0
        report = GradReport(name, error, tolerance, error <= tolerance)
        logger.debug('%s', report)
        reports.append(report)
    return reports


def _case(name: str, op, shapes: Dict[str, tuple], rng: np.random.Generator) -> Graph:
    """Graph of one op whose tensor operands are trainable parameters, reduced along a random direction."""
    graph = Graph()
    refs = []
    for operand, shape in shapes.items():
        refs.append(graph.parameter(operand, rng.uniform(-1.0, 1.0, size=shape)))
    out = graph.apply(op, *refs, name=name)
    shape = np.shape(graph.forward({}, until=out)[out])
    graph.apply(Dot(rng.standard_normal(shape)), out, name='loss')
    return graph


def _cross_entropy_labels(rng: np.random.Generator) -> np.ndarray:
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, :] = UNLABELED
    labels[1, :, 1] = UNLABELED
    return labels


# name -> (op factory, parameter operand shapes)
OPERATION_CASES: 'Dict[str, Callable]' = {
    'conv2d': lambda: (Conv2d(dilation=2, padding=2), {'x': (2, 3, 6, 6), 'w': (4, 3, 3, 3), 'b': (4,)}),
    'conv2d_strided': lambda: (Conv2d(stride=2, padding=1), {'x': (1, 2, 6, 6), 'w': (3, 2, 3, 3), 'b': (3,)}),
    'conv_transpose2d': lambda: (ConvTranspose2d(2, 1), {'x': (1, 2, 3, 3), 'w': (2, 3, 4, 4)}),
    'maxpool2': lambda: (MaxPool2(), {'x': (2, 2, 4, 4)}),
    'avgpool': lambda: (AvgPool(2), {'x': (2, 2, 4, 4)}),
    'concat_channels': lambda: (ConcatChannels(), {'a': (1, 2, 3, 3), 'b': (1, 3, 3, 3)}),
    'softmax_channel': lambda: (SoftmaxChannel(), {'x': (2, 4, 3, 3)}),
    'relu': lambda: (Relu(), {'x': (2, 3, 3, 3)}),
    'tanh': lambda: (Tanh(), {'x': (2, 3, 3, 3)}),
}


def check_operations(seed: int = 0, epsilon: float = 1e-5, tolerance: float = 1e-5) -> List[GradReport]:
    """Gradient checks of every primitive op on small random operands.

    Report names are ``<case>/<operand>``. The masked cross-entropy case
    includes unlabeled pixels, whose logit gradient must vanish exactly.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for case, factory in OPERATION_CASES.items():
        op, shapes = factory()
        graph = _case(case, op, shapes, rng)
        loss = graph.node('loss').index
        for report in gradcheck(graph, {}, loss, epsilon, tolerance):
            reports.append(GradReport(f'{case}/{report.op_name}', report.max_relative_error, tolerance,
                                      report.passed))
    feeds = {'labels': _cross_entropy_labels(rng)}
    graph = Graph()
    logits = graph.parameter('logits', rng.uniform(-2.0, 2.0, size=(2, 3, 4, 4)))
    labels = graph.input('labels')
    loss = graph.apply(MaskedCrossEntropy(), logits, labels, name='loss')
    for report in gradcheck(graph, feeds, loss, epsilon, tolerance):
        reports.append(GradReport(f'masked_cross_entropy/{report.op_name}', report.max_relative_error,
                                  tolerance, report.passed))
    failed = [r for r in reports if not r.passed]
    logger.info('Checked %d operand gradients, %d failed', len(reports), len(failed))
    return reports


def check_network(seed: int = 0, epsilon: float = 1e-5, tolerance: float = 1e-4,
                  context_channels: int = 2) -> List[GradReport]:
    """Gradient check of a whole micro network with smooth activations.

    The network sees an 8x8 image over two materials with context injected
    at pool2; tanh replaces relu so finite differences stay away from kinks.
    """
    config = NetworkConfig(num_materials=2, stage_widths=[2, 2, 2, 2], head_width=3, activation='tanh',
                           context_channels=context_channels, injection_layer='pool2', patch_size=8, seed=seed)
    graph = build_network(config)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))
    labels = rng.integers(0, 2, size=(1, 8, 8))
    labels[0, :2, :] = UNLABELED
    context = None
    if context_channels:
        context = np.ascontiguousarray(rng.dirichlet(np.ones(context_channels), size=(1, 8, 8)).transpose(0, 3, 1, 2))
    feeds = network_feeds(graph, images, labels, context)
    return gradcheck(graph, feeds, graph.node('loss').index, epsilon, tolerance)
