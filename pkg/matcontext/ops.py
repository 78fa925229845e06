# This file is part of matcontext, local material recognition in global context.
"""Differentiable operations over N x C x H x W float64 tensors.

Every op is a small stateless object: ``forward`` maps input arrays to an
output plus whatever it wants to remember for the backward pass, and
``backward`` maps the output gradient back to one gradient per input
(``None`` for inputs that are not differentiable, such as labels).
"""
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyLabelError, ShapeError
from .tensor import DTYPE, check_image_like, freeze


UNLABELED = -1


class Op:
    """Base class of graph operations."""

    name = 'op'

    def forward(self, *inputs: np.ndarray):
        raise NotImplementedError(f'{self.name} has no forward pass')

    def backward(self, grad: np.ndarray, inputs: Sequence[np.ndarray], output: np.ndarray, cache) -> Tuple:
        raise NotImplementedError(f'{self.name} has no backward pass')

    def __repr__(self) -> str:
        return self.name


def conv_output_extent(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


class Conv2d(Op):
    """Zero-padded, strided, dilated cross-correlation with a per-channel bias."""

    name = 'conv2d'

    def __init__(self, stride: int = 1, dilation: int = 1, padding: int = 0) -> None:
        if stride < 1 or dilation < 1 or padding < 0:
            raise ShapeError(f'Invalid conv2d geometry: stride={stride}, dilation={dilation}, padding={padding}')
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def _check(self, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> None:
        check_image_like(x, 'conv2d input')
        if w.ndim != 4:
            raise ShapeError(f'conv2d weights must be K x C x kh x kw, got shape {w.shape}')
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f'conv2d input has {x.shape[1]} channels but weights expect {w.shape[1]}')
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f'conv2d bias must have shape ({w.shape[0]},), got {b.shape}')
        for size, kernel, axis in ((x.shape[2], w.shape[2], 'height'), (x.shape[3], w.shape[3], 'width')):
            if size + 2 * self.padding < self.dilation * (kernel - 1) + 1:
                raise ShapeError(f'conv2d input {axis} {size} is smaller than the dilated kernel '
                                 f'({kernel} taps, dilation {self.dilation}, padding {self.padding})')

    def _columns(self, padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
        d, s = self.dilation, self.stride
        span = (d * (kh - 1) + 1, d * (kw - 1) + 1)
        windows = sliding_window_view(padded, span, axis=(2, 3))[:, :, ::s, ::s, ::d, ::d]
        n, c, ho, wo = windows.shape[:4]
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)

    def forward(self, x, w, b=None):
        self._check(x, w, b)
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        columns = self._columns(padded, w.shape[2], w.shape[3])
        y = (columns @ w.reshape(w.shape[0], -1).T).transpose(0, 3, 1, 2)
        if b is not None:
            y = y + b[None, :, None, None]
        return y, columns

    def backward(self, grad, inputs, output, cache):
        x, w = inputs[0], inputs[1]
        n, c, h, width = x.shape
        k, _, kh, kw = w.shape
        ho, wo = grad.shape[2], grad.shape[3]
        d, s, p = self.dilation, self.stride, self.padding
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, k)
        dw = (grad_rows.T @ cache.reshape(-1, cache.shape[-1])).reshape(w.shape)
        dcolumns = (grad_rows @ w.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
        dpadded = np.zeros((n, c, h + 2 * p, width + 2 * p), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += \
                    dcolumns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dpadded[:, :, p:p + h, p:p + width]
        if len(inputs) == 3:
            return dx, dw, grad.sum(axis=(0, 2, 3))
        return dx, dw


class ConvTranspose2d(Op):
    """Adjoint of a strided convolution, used as learnable upsampling.

    Weights are laid out C x K x kh x kw (input channels first). The optional
    ``padding`` crops that many pixels from every border of the result.
    """

    name = 'conv_transpose2d'

    def __init__(self, stride: int = 1, padding: int = 0) -> None:
        if stride < 1 or padding < 0:
            raise ShapeError(f'Invalid conv_transpose2d geometry: stride={stride}, padding={padding}')
        self.stride = stride
        self.padding = padding

    def full_extent(self, size: int, kernel: int) -> int:
        return (size - 1) * self.stride + kernel

    def forward(self, x, w):
        check_image_like(x, 'conv_transpose2d input')
        if w.ndim != 4:
            raise ShapeError(f'conv_transpose2d weights must be C x K x kh x kw, got shape {w.shape}')
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f'conv_transpose2d input has {x.shape[1]} channels but weights expect {w.shape[0]}')
        n, _, h, width = x.shape
        _, k, kh, kw = w.shape
        s, p = self.stride, self.padding
        fh, fw = self.full_extent(h, kh), self.full_extent(width, kw)
        if fh - 2 * p < 1 or fw - 2 * p < 1:
            raise ShapeError(f'conv_transpose2d padding {p} crops away the whole {fh}x{fw} output')
        full = np.zeros((n, k, fh, fw), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (width - 1) + 1:s] += \
                    np.tensordot(x, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        return full[:, :, p:fh - p, p:fw - p], None

    def backward(self, grad, inputs, output, cache):
        x, w = inputs
        n, c, h, width = x.shape
        _, k, kh, kw = w.shape
        s, p = self.stride, self.padding
        fh, fw = self.full_extent(h, kh), self.full_extent(width, kw)
        dfull = np.zeros((n, k, fh, fw), dtype=DTYPE)
        dfull[:, :, p:fh - p, p:fw - p] = grad
        dx = np.zeros(x.shape, dtype=DTYPE)
        dw = np.zeros(w.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                window = dfull[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (width - 1) + 1:s]
                dx += np.tensordot(window, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                dw[:, :, i, j] = np.tensordot(x, window, axes=([0, 2, 3], [0, 2, 3]))
        return dx, dw


class MaxPool2(Op):
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""

    name = 'maxpool2'

    @staticmethod
    def _windows(x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)

    def forward(self, x):
        check_image_like(x, 'maxpool2 input')
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f'maxpool2 needs even extents, got {x.shape[2]}x{x.shape[3]}')
        windows = self._windows(x)
        argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0], argmax

    def backward(self, grad, inputs, output, cache):
        n, c, h, w = inputs[0].shape
        dwindows = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(dwindows, cache[..., None], grad[..., None], axis=-1)
        dx = dwindows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)


class AvgPool(Op):
    """Non-overlapping average pooling by an integer factor."""

    name = 'avgpool'

    def __init__(self, factor: int) -> None:
        if factor < 1:
            raise ShapeError(f'avgpool factor must be positive, got {factor}')
        self.factor = factor

    def forward(self, x):
        check_image_like(x, 'avgpool input')
        f = self.factor
        n, c, h, w = x.shape
        if h % f or w % f:
            raise ShapeError(f'avgpool factor {f} does not divide {h}x{w}')
        return x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5)), None

    def backward(self, grad, inputs, output, cache):
        f = self.factor
        return (np.repeat(np.repeat(grad, f, axis=2), f, axis=3) / (f * f),)


class ConcatChannels(Op):
    name = 'concat_channels'

    def forward(self, a, b):
        check_image_like(a, 'concat_channels first input')
        check_image_like(b, 'concat_channels second input')
        if a.shape[1] < 1 or b.shape[1] < 1:
            raise ShapeError('concat_channels needs at least one channel on each side')
        if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
            raise ShapeError(f'concat_channels spatial mismatch: {a.shape} vs {b.shape}')
        return np.concatenate([a, b], axis=1), a.shape[1]

    def backward(self, grad, inputs, output, cache):
        return grad[:, :cache], grad[:, cache:]


class Relu(Op):
    name = 'relu'

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, grad, inputs, output, cache):
        return (np.where(inputs[0] > 0.0, grad, 0.0),)


class Tanh(Op):
    name = 'tanh'

    def forward(self, x):
        return np.tanh(x), None

    def backward(self, grad, inputs, output, cache):
        return (grad * (1.0 - output * output),)


class SoftmaxChannel(Op):
    """Per-pixel softmax over the channel axis, stabilised by the pixel maximum."""

    name = 'softmax_channel'

    def forward(self, x):
        check_image_like(x, 'softmax_channel input')
        if x.shape[1] < 2:
            raise ShapeError(f'softmax_channel needs at least 2 channels, got {x.shape[1]}')
        shifted = np.exp(x - x.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True), None

    def backward(self, grad, inputs, output, cache):
        return (output * (grad - (grad * output).sum(axis=1, keepdims=True)),)


class Sum(Op):
    name = 'sum'

    def forward(self, x):
        return np.asarray(x.sum(), dtype=DTYPE), None

    def backward(self, grad, inputs, output, cache):
        return (np.full(inputs[0].shape, float(grad), dtype=DTYPE),)


class Dot(Op):
    """Inner product with a fixed direction tensor; turns any op into a scalar loss."""

    name = 'dot'

    def __init__(self, direction: np.ndarray) -> None:
        self.direction = freeze(np.array(direction, dtype=DTYPE))

    def forward(self, x):
        if x.shape != self.direction.shape:
            raise ShapeError(f'dot direction has shape {self.direction.shape}, input has {x.shape}')
        return np.asarray((x * self.direction).sum(), dtype=DTYPE), None

    def backward(self, grad, inputs, output, cache):
        return (float(grad) * self.direction,)


def log_softmax_channel(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class MaskedCrossEntropy(Op):
    """Softmax cross-entropy averaged over labeled pixels only.

    Inputs are logits N x C x H x W and integer labels N x H x W where
    ``UNLABELED`` marks pixels without ground truth. The logits gradient is
    exactly zero at every unlabeled pixel.
    """

    name = 'masked_cross_entropy'

    def forward(self, logits, labels):
        check_image_like(logits, 'masked_cross_entropy logits')
        n, c, h, w = logits.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f'labels of shape {labels.shape} do not match logits {logits.shape}')
        labels = labels.astype(np.int64)
        if labels.min() < UNLABELED or labels.max() >= c:
            raise ShapeError(f'labels must lie in [0, {c - 1}] or be UNLABELED')
        labeled = labels != UNLABELED
        count = int(labeled.sum())
        if count == 0:
            raise EmptyLabelError('No labeled pixel to evaluate the loss on')
        log_probs = log_softmax_channel(logits)
        ni, hi, wi = np.nonzero(labeled)
        picked = log_probs[ni, labels[labeled], hi, wi]
        loss = -picked.sum() / count
        return np.asarray(loss, dtype=DTYPE), (np.exp(log_probs), labels, labeled, count)

    def backward(self, grad, inputs, output, cache):
        probs, labels, labeled, count = cache
        dlogits = probs.copy()
        ni, hi, wi = np.nonzero(labeled)
        dlogits[ni, labels[labeled], hi, wi] -= 1.0
        dlogits = np.where(labeled[:, None, :, :], dlogits, 0.0) * (float(grad) / count)
        return dlogits, None


# Functional forms: pure functions returning frozen tensors.

def conv2d(input, weights, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> np.ndarray:
    args = (input, weights) if bias is None else (input, weights, bias)
    return freeze(Conv2d(stride, dilation, padding).forward(*args)[0])


def conv_transpose2d(input, weights, stride: int = 1, padding: int = 0) -> np.ndarray:
    return freeze(ConvTranspose2d(stride, padding).forward(input, weights)[0])


def maxpool2(input) -> np.ndarray:
    return freeze(MaxPool2().forward(input)[0])


def avgpool(input, factor: int) -> np.ndarray:
    return freeze(AvgPool(factor).forward(input)[0])


def concat_channels(a, b) -> np.ndarray:
    return freeze(ConcatChannels().forward(a, b)[0])


def softmax_channel(input) -> np.ndarray:
    return freeze(SoftmaxChannel().forward(input)[0])
