# This file is part of matcontext, local material recognition in global context.
import numpy as np

from .errors import ShapeError


DTYPE = np.float64


def tensor(data, shape=None) -> np.ndarray:
    """Builds an immutable 64-bit tensor.

    Parameters
    ----------
    data: array_like
        Values, either already shaped or flat in row-major order.
    shape: Sequence[int], optional
        Target extents. When given, ``data`` is reshaped to it and
        ``product(shape)`` must equal the number of values.

    Returns
    -------
    np.ndarray
        Contiguous read-only float64 array.
    """
    array = np.array(data, dtype=DTYPE, copy=True)
    if shape is not None:
        shape = tuple(int(extent) for extent in shape)
        if int(np.prod(shape)) != array.size:
            raise ShapeError(f'Cannot shape {array.size} values as {shape}')
        array = array.reshape(shape)
    check_tensor(array)
    return freeze(array)


def freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=DTYPE)
    array.flags.writeable = False
    return array


def check_tensor(array: np.ndarray, name: str = 'tensor') -> None:
    if any(extent < 1 for extent in array.shape):
        raise ShapeError(f'{name} has an empty extent: {array.shape}')
    if not np.all(np.isfinite(array)):
        raise ValueError(f'{name} holds non-finite values')


def check_image_like(array: np.ndarray, name: str) -> None:
    if array.ndim != 4:
        raise ShapeError(f'{name} must be N x C x H x W, got shape {array.shape}')


def random_tensor(shape, seed: int, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return freeze(rng.uniform(low, high, size=tuple(shape)))
