# This file is part of matcontext, local material recognition in global context.
"""Define-then-run computation graphs with reverse-mode differentiation."""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .ops import Op
from .tensor import DTYPE, freeze


logger = logging.getLogger(__name__)

INPUT = 'input'
PARAMETER = 'parameter'
OPERATION = 'operation'


@dataclass(frozen=True)
class Node:
    index: int
    name: str
    kind: str
    op: Optional[Op] = None
    inputs: Tuple[int, ...] = ()


@dataclass
class Run:
    """Values computed by one forward pass, indexed like ``Graph.nodes``."""
    values: List[np.ndarray]
    caches: List[object]
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.values[index]


class Graph:
    """Ordered list of nodes; creation order is the topological order.

    A node can only reference nodes created before it, so every graph is
    acyclic by construction. Parameters are named tensors stored on the graph;
    ``forward`` may override them without touching the stored values.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.parameters: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        self.trainable: Dict[str, bool] = {}
        self.config = None
        self._by_name: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, name: str, kind: str, op: Optional[Op] = None, inputs: Tuple[int, ...] = ()) -> int:
        if name in self._by_name:
            raise ValueError('Node ' + name + ' redefined')
        for ref in inputs:
            if not 0 <= ref < len(self.nodes):
                raise ValueError(f'Node {name} references unknown node {ref}')
        node = Node(len(self.nodes), name, kind, op, tuple(inputs))
        self.nodes.append(node)
        self._by_name[name] = node.index
        return node.index

    def input(self, name: str) -> int:
        return self._add(name, INPUT)

    def parameter(self, name: str, value: np.ndarray, trainable: bool = True) -> int:
        index = self._add(name, PARAMETER)
        self.parameters[name] = freeze(np.array(value, dtype=DTYPE))
        self.trainable[name] = trainable
        return index

    def apply(self, op: Op, *inputs: int, name: Optional[str] = None) -> int:
        if name is None:
            name = f'{op.name}_{len(self.nodes)}'
        return self._add(name, OPERATION, op, inputs)

    def node(self, name: str) -> Node:
        if name not in self._by_name:
            raise KeyError('Node ' + name + ' is not in the graph')
        return self.nodes[self._by_name[name]]

    def operations(self, op_name: Optional[str] = None) -> List[Node]:
        return [node for node in self.nodes
                if node.kind == OPERATION and (op_name is None or node.op.name == op_name)]

    def trainable_names(self) -> List[str]:
        return [name for name in self.parameters if self.trainable[name]]

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        """Replaces stored parameter values, checking names and shapes."""
        for name, value in values.items():
            if name not in self.parameters:
                raise KeyError('Parameter ' + name + ' is not in the graph')
            if np.shape(value) != self.parameters[name].shape:
                raise ShapeError(f'Parameter {name} has shape {self.parameters[name].shape}, '
                                 f'got {np.shape(value)}')
        for name, value in values.items():
            self.parameters[name] = freeze(np.array(value, dtype=DTYPE))

    def forward(self, feeds: Mapping[str, np.ndarray], parameters: Optional[Mapping[str, np.ndarray]] = None,
                until: Optional[int] = None) -> Run:
        """Evaluates nodes in order.

        Parameters
        ----------
        feeds: Mapping[str, np.ndarray]
            Value of every input node reached.
        parameters: Mapping[str, np.ndarray], optional
            Overrides for stored parameter values.
        until: int, optional
            Last node index to evaluate; defaults to the whole graph.

        Returns
        -------
        Run
            All computed values (read-only) and backward caches.
        """
        params = dict(self.parameters)
        if parameters:
            params.update(parameters)
        last = len(self.nodes) - 1 if until is None else until
        values: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        caches: List[object] = [None] * len(self.nodes)
        for node in self.nodes[:last + 1]:
            if node.kind == INPUT:
                # Inputs are checked lazily: a prediction pass needs no labels.
                if node.name in feeds:
                    values[node.index] = np.asarray(feeds[node.name])
            elif node.kind == PARAMETER:
                values[node.index] = params[node.name]
            else:
                for ref in node.inputs:
                    if values[ref] is None:
                        raise KeyError('Missing feed for input ' + self.nodes[ref].name)
                output, cache = node.op.forward(*[values[ref] for ref in node.inputs])
                values[node.index] = freeze(output)
                caches[node.index] = cache
        return Run(values, caches, params)


def backward(graph: Graph, run: Run, loss: int) -> Dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every trainable parameter.

    Gradients of nodes used more than once are summed in node order, so
    identical runs produce bit-identical results.
    """
    loss_value = run.values[loss]
    if loss_value is None or np.size(loss_value) != 1:
        raise ShapeError(f'backward needs a scalar loss, got shape {np.shape(loss_value)}')
    grads: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[loss] = np.ones(np.shape(loss_value), dtype=DTYPE)
    for node in reversed(graph.nodes[:loss + 1]):
        grad = grads[node.index]
        if grad is None or node.kind != OPERATION:
            continue
        inputs = [run.values[ref] for ref in node.inputs]
        input_grads = node.op.backward(grad, inputs, run.values[node.index], run.caches[node.index])
        for ref, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or graph.nodes[ref].kind == INPUT:
                continue
            if grads[ref] is None:
                grads[ref] = np.array(input_grad, dtype=DTYPE)
            else:
                grads[ref] = grads[ref] + input_grad
    result = OrderedDict()
    for name in graph.trainable_names():
        index = graph.node(name).index
        grad = grads[index]
        result[name] = np.zeros(graph.parameters[name].shape, dtype=DTYPE) if grad is None else grad
    return result
