# This file is part of matcontext, local material recognition in global context.
"""Bit-exact storage of tensors, label maps, checkpoints and scenes.

Byte layouts are described in docs/formats.md.
"""
import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .context import ContextSource
from .errors import BadMagicError, ContainerError, ContextError, LengthMismatchError, TruncatedPayloadError
from .graph import Graph
from .maps import LabelMap, PredictionMap
from .network import NetworkConfig, build_network
from .ops import UNLABELED
from .world import Scene, WorldSpec


logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b'CTXF1'
LABEL_MAGIC = b'LBL16'
CONTEXT_SUFFIX = '.context.ctx'
PNG_UNLABELED = 255
RAW_UNLABELED = 65535
# RGB per material index; materials beyond the palette wrap around.
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
]
UNLABELED_COLOR = (0, 0, 0)


@dataclass
class Container:
    entries: 'OrderedDict[str, np.ndarray]' = field(default_factory=OrderedDict)
    header: Dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, temp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path), suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(temp, path)
    except BaseException:
        if os.path.exists(temp):
            os.remove(temp)
        raise


def encode_container(entries: Mapping[str, np.ndarray], header: Optional[Mapping] = None) -> bytes:
    meta = dict(header or {})
    records, payload, offset = [], [], 0
    for name, value in entries.items():
        data = np.ascontiguousarray(value, dtype='<f8').tobytes()
        records.append({'name': name, 'shape': list(np.shape(value)), 'offset': offset, 'length': len(data)})
        payload.append(data)
        offset += len(data)
    meta['dtype'] = 'f64'
    meta['entries'] = records
    text = json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return CONTAINER_MAGIC + struct.pack('<Q', len(text)) + text + b''.join(payload)


def decode_container(data: bytes, source: str = '<bytes>') -> Container:
    if data[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise BadMagicError(f'{source} is not a tensor container (bad magic)')
    start = len(CONTAINER_MAGIC) + 8
    if len(data) < start:
        raise TruncatedPayloadError(f'{source} ends inside the header length')
    (header_length,) = struct.unpack('<Q', data[len(CONTAINER_MAGIC):start])
    if len(data) < start + header_length:
        raise TruncatedPayloadError(f'{source} ends inside its {header_length}-byte header')
    try:
        header = json.loads(data[start:start + header_length].decode('utf-8'))
        records = header.pop('entries')
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as error:
        raise ContainerError(f'{source} has a malformed header: {error}') from error
    if header.pop('dtype', None) != 'f64':
        raise ContainerError(f'{source} does not hold f64 data')
    payload = data[start + header_length:]
    entries = OrderedDict()
    declared = 0
    for record in records:
        try:
            name, shape = record['name'], tuple(record['shape'])
            offset, length = int(record['offset']), int(record['length'])
        except (KeyError, TypeError, ValueError) as error:
            raise ContainerError(f'{source} has a malformed entry record: {error}') from error
        if length != int(np.prod(shape, dtype=np.int64)) * 8:
            raise LengthMismatchError(f'{source}: entry {name} declares {length} bytes for shape {shape}')
        if offset + length > len(payload):
            raise TruncatedPayloadError(f'{source}: payload ends before entry {name} '
                                        f'({len(payload)} of {offset + length} bytes)')
        array = np.frombuffer(payload, dtype='<f8', count=length // 8, offset=offset)
        entries[name] = array.astype(np.float64).reshape(shape)
        declared = max(declared, offset + length)
    if declared != len(payload):
        raise LengthMismatchError(f'{source}: payload holds {len(payload)} bytes, entries declare {declared}')
    return Container(entries, header)


def write_container(path: str, entries: Mapping[str, np.ndarray], header: Optional[Mapping] = None) -> None:
    _atomic_write(path, encode_container(entries, header))
    logger.debug('Wrote %d entries to %s', len(entries), path)


def read_container(path: str) -> Container:
    with open(path, 'rb') as f:
        return decode_container(f.read(), path)


def save_checkpoint(path: str, graph: Graph, parameters: Optional[Mapping[str, np.ndarray]] = None,
                    extra: Optional[Mapping] = None) -> None:
    """Stores parameters (defaulting to the graph's) with the NetworkConfig."""
    values = OrderedDict((name, (parameters or graph.parameters)[name]) for name in graph.parameters)
    header = dict(extra or {})
    header['network_config'] = graph.config.to_dict()
    write_container(path, values, header)


def load_checkpoint(path: str) -> Tuple[Graph, Container]:
    """Rebuilds the network a checkpoint was saved from and loads its parameters."""
    container = read_container(path)
    if 'network_config' not in container.header:
        raise ContainerError(f'{path} holds no network config')
    graph = build_network(NetworkConfig.from_dict(container.header['network_config']))
    missing = sorted(set(graph.parameters) - set(container.entries))
    if missing:
        raise ContainerError(f'{path} lacks parameters {", ".join(missing)}')
    graph.load_parameters(container.entries)
    return graph, container


def write_label_png(path: str, labels: LabelMap) -> None:
    """8-bit grayscale PNG, 255 marking unlabeled pixels."""
    if labels.labels.size and labels.labels.max() >= PNG_UNLABELED:
        raise ContainerError(f'PNG label maps hold at most {PNG_UNLABELED} categories')
    pixels = np.where(labels.mask, labels.labels, PNG_UNLABELED).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def read_label_png(path: str) -> LabelMap:
    with Image.open(path) as image:
        if image.mode != 'L':
            raise ContainerError(f'{path} is a {image.mode} image, label maps are 8-bit grayscale')
        pixels = np.array(image, dtype=np.int64)
    return LabelMap(np.where(pixels == PNG_UNLABELED, UNLABELED, pixels))


def encode_label_raw(labels: LabelMap) -> bytes:
    if labels.labels.size and labels.labels.max() >= RAW_UNLABELED:
        raise ContainerError(f'Raw label maps hold at most {RAW_UNLABELED} categories')
    cells = np.where(labels.mask, labels.labels, RAW_UNLABELED).astype('<u2')
    return LABEL_MAGIC + struct.pack('<II', labels.height, labels.width) + cells.tobytes()


def decode_label_raw(data: bytes, source: str = '<bytes>') -> LabelMap:
    if data[:len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise BadMagicError(f'{source} is not a raw label map (bad magic)')
    start = len(LABEL_MAGIC) + 8
    if len(data) < start:
        raise TruncatedPayloadError(f'{source} ends inside its size fields')
    height, width = struct.unpack('<II', data[len(LABEL_MAGIC):start])
    expected = height * width * 2
    if len(data) - start < expected:
        raise TruncatedPayloadError(f'{source} holds {len(data) - start} of {expected} label bytes')
    if len(data) - start > expected:
        raise LengthMismatchError(f'{source} holds {len(data) - start} label bytes, {height}x{width} needs {expected}')
    cells = np.frombuffer(data, dtype='<u2', offset=start).astype(np.int64).reshape(height, width)
    return LabelMap(np.where(cells == RAW_UNLABELED, UNLABELED, cells))


def write_label_raw(path: str, labels: LabelMap) -> None:
    _atomic_write(path, encode_label_raw(labels))


def read_label_raw(path: str) -> LabelMap:
    with open(path, 'rb') as f:
        return decode_label_raw(f.read(), path)


def palette_color(index: int) -> Tuple[int, int, int]:
    if index == UNLABELED:
        return UNLABELED_COLOR
    return PALETTE[index % len(PALETTE)]


def colorize(categories: np.ndarray) -> np.ndarray:
    """H x W category indices to H x W x 3 uint8 palette colors."""
    table = np.array(PALETTE, dtype=np.uint8)
    rgb = table[np.where(categories == UNLABELED, 0, categories) % len(PALETTE)]
    rgb[categories == UNLABELED] = UNLABELED_COLOR
    return rgb


def legend_path(path: str) -> str:
    return os.path.splitext(path)[0] + '.legend.json'


def export_color_map(path: str, categories: np.ndarray, names: Sequence[str]) -> None:
    """Writes a PPM color map and a JSON legend next to it."""
    Image.fromarray(colorize(np.asarray(categories))).save(path, format='PPM')
    legend = [{'index': i, 'name': name, 'color': list(palette_color(i))} for i, name in enumerate(names)]
    with open(legend_path(path), 'w') as f:
        json.dump({'categories': legend, 'unlabeled': list(UNLABELED_COLOR)}, f, indent=2)


def export_prediction(path: str, prediction: PredictionMap, materials: Sequence[str]) -> None:
    export_color_map(path, prediction.argmax, materials)


def save_scene(path: str, scene: Scene, spec: WorldSpec) -> None:
    entries = OrderedDict()
    if scene.image is not None:
        entries['image'] = scene.image
    entries['labels'] = scene.labels.labels
    entries['objects'] = scene.objects
    header = {
        'categories': {'places': spec.places, 'objects': spec.objects, 'materials': spec.materials},
        'scene': {'index': scene.index, 'place': scene.place, 'regions': [list(r) for r in scene.regions]},
    }
    write_container(path, entries, header)


def load_scene(path: str) -> Tuple[Scene, Container]:
    container = read_container(path)
    try:
        meta = container.header['scene']
        labels = LabelMap(container['labels'].astype(np.int64))
        objects = container['objects'].astype(np.int64)
    except KeyError as error:
        raise ContainerError(f'{path} is not a scene container: missing {error}') from error
    scene = Scene(meta['index'], meta['place'], objects, labels, container.entries.get('image'),
                  [tuple(r) for r in meta.get('regions', [])])
    return scene, container


def context_path(directory: str, index: int) -> str:
    """Where synth-gen puts the recogniser outputs of scene ``index``."""
    return os.path.join(directory, f'scene_{index:04d}{CONTEXT_SUFFIX}')


def write_context(path: str, sources: Sequence[ContextSource]) -> None:
    """Context sources as one container: entry ``source<i>`` holds the values of source i."""
    if not sources:
        raise ContainerError('A context file needs at least one source')
    entries = OrderedDict((f'source{i}', source.values) for i, source in enumerate(sources))
    header = {'context': [{'kind': source.kind, 'categories': list(source.categories),
                           'hierarchy': source.hierarchy} for source in sources]}
    write_container(path, entries, header)


def read_context(path: str) -> List[ContextSource]:
    container = read_container(path)
    records = container.header.get('context')
    if not isinstance(records, list) or not records:
        raise ContainerError(f'{path} holds no context sources')
    sources = []
    for i, record in enumerate(records):
        name = f'source{i}'
        if name not in container.entries:
            raise ContainerError(f'{path} lacks the values of {name}')
        try:
            sources.append(ContextSource(record['kind'], tuple(record['categories']), container[name],
                                         record.get('hierarchy')))
        except (KeyError, TypeError, AttributeError) as error:
            raise ContainerError(f'{path} has a malformed context record: {error}') from error
        except ContextError as error:
            raise ContainerError(f'{path}: {error}') from error
    return sources


def save_report(path: str, report: Mapping) -> None:
    """JSON with sorted keys, so equal reports are byte-identical."""
    _atomic_write(path, (json.dumps(report, indent=2, sort_keys=True) + '\n').encode('utf-8'))


def categories_of(container: Container, kind: str) -> List[str]:
    return list(container.header.get('categories', {}).get(kind, []))
