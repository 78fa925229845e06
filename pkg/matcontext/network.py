# This file is part of matcontext, local material recognition in global context.
"""Fully-convolutional material network with a configurable context injection point.

Topology (names in brackets are valid injection layers)::

    image -> conv1 -> [pool1] -> conv2 -> [pool2] -> dilated conv3 [conv3_3]
          -> dilated conv4 [conv4_3] -> up1 -> up2 [upsampling]
          -> skip concat (image) -> fuse 1x1 -> classifier 1x1 -> softmax

Context probability maps are average-pooled to the spatial extent of the
injection layer and concatenated onto its output channels.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .context import stack_context
from .errors import ConfigError, ContextError, ShapeError, UnknownLayerError
from .graph import Graph
from .maps import PredictionMap
from .ops import (AvgPool, ConcatChannels, Conv2d, ConvTranspose2d, MaskedCrossEntropy, MaxPool2, Relu,
                  SoftmaxChannel, Tanh)


logger = logging.getLogger(__name__)

INJECTION_LAYERS = ('pool1', 'pool2', 'conv3_3', 'conv4_3', 'upsampling')
# Downsampling factor of each injection layer relative to the input.
LAYER_FACTORS = {'pool1': 2, 'pool2': 4, 'conv3_3': 4, 'conv4_3': 4, 'upsampling': 1}
DOWNSAMPLING = 4
SKIP_MODES = ('raw', 'learned', 'none')
ACTIVATIONS = {'relu': Relu, 'tanh': Tanh}


@dataclass
class NetworkConfig:
    num_materials: int = 16
    stage_widths: List[int] = field(default_factory=lambda: [8, 16, 16, 16])
    dilation_rates: List[int] = field(default_factory=lambda: [2, 4])
    injection_layer: str = 'upsampling'
    context_channels: int = 0
    skip_mode: str = 'raw'
    skip_width: int = 4
    upsample_kernel: int = 2
    head_width: int = 16
    patch_size: int = 48
    image_channels: int = 3
    activation: str = 'relu'
    zero_init_classifier: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.num_materials < 2:
            raise ConfigError(f'num_materials must be at least 2, got {self.num_materials}')
        if self.injection_layer not in INJECTION_LAYERS:
            raise UnknownLayerError(f'Unknown injection layer {self.injection_layer}; '
                                    f'valid layers are {", ".join(INJECTION_LAYERS)}')
        if len(self.stage_widths) != 4 or min(self.stage_widths) < 1:
            raise ConfigError(f'stage_widths needs 4 positive widths, got {self.stage_widths}')
        if len(self.dilation_rates) != 2 or min(self.dilation_rates) < 1:
            raise ConfigError(f'dilation_rates needs 2 positive rates, got {self.dilation_rates}')
        if self.patch_size % DOWNSAMPLING:
            raise ConfigError(f'patch_size {self.patch_size} is not divisible by {DOWNSAMPLING}')
        if self.upsample_kernel < 2 or self.upsample_kernel % 2:
            raise ConfigError(f'upsample_kernel must be even and at least 2, got {self.upsample_kernel}')
        if self.context_channels < 0 or self.head_width < 1 or self.image_channels < 1:
            raise ConfigError('context_channels must be nonnegative; head_width and image_channels positive')
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f'Unknown skip_mode {self.skip_mode}; valid modes are {", ".join(SKIP_MODES)}')
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f'Unknown activation {self.activation}; valid ones are {", ".join(ACTIVATIONS)}')

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetworkConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError('Unknown network config keys: ' + ', '.join(unknown))
        config = cls(**data)
        config.validate()
        return config


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bilinear_kernel(in_channels: int, out_channels: int, kernel: int, stride: int) -> np.ndarray:
    """Channel-diagonal upsampling weights, C_in x C_out x k x k.

    A kernel equal to the stride gets the nearest-neighbour kernel of ones;
    larger kernels get the usual separable bilinear ramp. Input channels
    beyond C_out (context joined before upsampling) start at zero.
    """
    if kernel == stride:
        taps = np.ones(kernel)
    else:
        factor = (kernel + 1) // 2
        center = factor - 1 if kernel % 2 == 1 else factor - 0.5
        taps = 1.0 - np.abs(np.arange(kernel) - center) / factor
    weights = np.zeros((in_channels, out_channels, kernel, kernel))
    for c in range(min(in_channels, out_channels)):
        weights[c, c] = np.outer(taps, taps)
    return weights


class _Builder:
    """Accumulates layers on a graph while tracking channels and scale."""

    def __init__(self, config: NetworkConfig) -> None:
        self.config = config
        self.graph = Graph()
        self.rng = np.random.default_rng(config.seed)
        self.activation = ACTIVATIONS[config.activation]

    def conv(self, name: str, x: int, in_channels: int, out_channels: int, kernel: int = 3,
             dilation: int = 1, zero: bool = False) -> int:
        padding = dilation * (kernel - 1) // 2
        shape = (out_channels, in_channels, kernel, kernel)
        init = np.zeros(shape) if zero else fan_in_uniform(self.rng, shape, in_channels * kernel * kernel)
        w = self.graph.parameter(name + '.weight', init)
        b = self.graph.parameter(name + '.bias', np.zeros(out_channels))
        return self.graph.apply(Conv2d(1, dilation, padding), x, w, b, name=name)

    def act(self, name: str, x: int) -> int:
        return self.graph.apply(self.activation(), x, name=name)

    def upsample(self, name: str, x: int, in_channels: int, out_channels: int) -> int:
        k = self.config.upsample_kernel
        w = self.graph.parameter(name + '.weight', bilinear_kernel(in_channels, out_channels, k, 2))
        return self.graph.apply(ConvTranspose2d(2, (k - 2) // 2), x, w, name=name)

    def inject(self, layer: str, x: int, channels: int, context: Optional[int]) -> Tuple[int, int]:
        if context is None or layer != self.config.injection_layer:
            return x, channels
        factor = LAYER_FACTORS[layer]
        if factor > 1:
            context = self.graph.apply(AvgPool(factor), context, name='context_' + layer)
        merged = self.graph.apply(ConcatChannels(), x, context, name='inject_' + layer)
        return merged, channels + self.config.context_channels


def build_network(config: NetworkConfig) -> Graph:
    """Builds the material network graph.

    The graph has inputs ``image`` (N x 3 x H x W), ``labels`` (N x H x W) and,
    when ``context_channels > 0``, ``context`` (N x Cc x H x W); outputs are the
    nodes ``logits``, ``probs`` and ``loss``.
    """
    config.validate()
    b = _Builder(config)
    g = b.graph
    w1, w2, w3, w4 = config.stage_widths
    image = g.input('image')
    labels = g.input('labels')
    context = g.input('context') if config.context_channels > 0 else None

    x = b.act('conv1_act', b.conv('conv1', image, config.image_channels, w1))
    x = g.apply(MaxPool2(), x, name='pool1')
    x, c = b.inject('pool1', x, w1, context)
    x = b.act('conv2_act', b.conv('conv2', x, c, w2))
    x = g.apply(MaxPool2(), x, name='pool2')
    x, c = b.inject('pool2', x, w2, context)
    x = b.act('conv3_3', b.conv('conv3', x, c, w3, dilation=config.dilation_rates[0]))
    x, c = b.inject('conv3_3', x, w3, context)
    x = b.act('conv4_3', b.conv('conv4', x, c, w4, dilation=config.dilation_rates[1]))
    x, c = b.inject('conv4_3', x, w4, context)
    x = b.upsample('up1', x, c, w4)
    x = b.upsample('up2', x, w4, w4)
    c = w4
    if config.skip_mode != 'none':
        if config.skip_mode == 'learned':
            skip = b.act('skip_act', b.conv('skip', image, config.image_channels, config.skip_width, kernel=1))
            skip_channels = config.skip_width
        else:
            skip, skip_channels = image, config.image_channels
        x = g.apply(ConcatChannels(), x, skip, name='skip_concat')
        c += skip_channels
    x, c = b.inject('upsampling', x, c, context)
    x = b.act('fuse_act', b.conv('fuse', x, c, config.head_width, kernel=1))
    logits = b.conv('logits', x, config.head_width, config.num_materials, kernel=1,
                    zero=config.zero_init_classifier)
    g.apply(SoftmaxChannel(), logits, name='probs')
    g.apply(MaskedCrossEntropy(), logits, labels, name='loss')
    g.config = config
    logger.debug('Built network with %d nodes and %d parameters', len(g), len(g.parameters))
    return g


def network_feeds(graph: Graph, images: np.ndarray, labels: Optional[np.ndarray] = None,
                  context: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Checks a batch against the network's config and names its feeds."""
    config: NetworkConfig = graph.config
    if images.ndim != 4 or images.shape[1] != config.image_channels:
        raise ShapeError(f'Expected N x {config.image_channels} x H x W images, got {images.shape}')
    n, _, h, w = images.shape
    if h % DOWNSAMPLING or w % DOWNSAMPLING:
        raise ShapeError(f'Image extent {h}x{w} is not divisible by {DOWNSAMPLING}')
    if config.context_channels > 0 and context is None:
        raise ContextError(f'The network expects {config.context_channels} context channels, none given')
    if config.context_channels == 0 and context is not None:
        raise ContextError('The network was built without context but context was given')
    feeds = {'image': images}
    if context is not None:
        if context.shape != (n, config.context_channels, h, w):
            raise ContextError(f'Expected context of shape {(n, config.context_channels, h, w)}, '
                               f'got {context.shape}')
        feeds['context'] = context
    if labels is not None:
        feeds['labels'] = labels
    return feeds


def predict(graph: Graph, image: np.ndarray, context=None) -> PredictionMap:
    """Dense prediction for one 3 x H x W image.

    ``context`` is a ContextSource, a sequence of them (stacked in order) or
    an already stacked Cc x H x W array.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f'predict takes one C x H x W image, got shape {image.shape}')
    stacked = None
    if context is not None:
        stacked = stack_context(context, image.shape[1], image.shape[2])[None]
    feeds = network_feeds(graph, image[None], context=stacked)
    probs = graph.node('probs').index
    return PredictionMap(graph.forward(feeds, until=probs)[probs][0])


def predict_batch(graph: Graph, images: np.ndarray, context: Optional[np.ndarray] = None,
                  parameters=None) -> np.ndarray:
    feeds = network_feeds(graph, images, context=context)
    probs = graph.node('probs').index
    return graph.forward(feeds, parameters, until=probs)[probs]


if __name__ == '__main__':
    config = NetworkConfig(num_materials=8, context_channels=5, injection_layer='pool2')
    graph = build_network(config)
    for node in graph.nodes:
        print(f'{node.index:3d} {node.kind:9s} {node.name}')
