from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor

if TYPE_CHECKING:
    from .ops import Primitive

logger = logging.getLogger(__name__)

_ACTIVE_GRAPH: ContextVar[Optional["Graph"]] = ContextVar("autodiff_active_graph", default=None)
_RECORDING: ContextVar[bool] = ContextVar("autodiff_recording", default=True)


def current_graph() -> Optional["Graph"]:
    """Graph that recorded operations are appended to, if any."""
    if not _RECORDING.get():
        return None
    return _ACTIVE_GRAPH.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


@dataclass
class Node:
    """One entry of the append-only node list."""
    op: Optional["Primitive"]
    inputs: Tuple[int, ...]
    tensor: Tensor
    args: Tuple[Tensor, ...] = ()
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.op is None


class Graph:
    """
    Dynamic computation graph for one forward/backward episode.

    Nodes are only ever appended, so inputs always precede outputs. Gradients
    are built from the same primitives and appended to this graph, which is
    what makes them differentiable again. Use as a context manager; leaving the
    block frees the graph and detaches every tensor it produced.

    A graph is single-owner: it must not be shared across threads. Leaf
    registration is kept inside the graph, so several graphs may read the same
    parameter tensors concurrently.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.unreachable: List[Tensor] = []
        self._leaf_index: Dict[int, int] = {}
        self._grad_cache: Dict[Tuple[int, int], Tensor] = {}
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None
        self.free()

    @contextmanager
    def recording(self) -> Iterator["Graph"]:
        """Make this graph active without freeing it on exit."""
        token = _ACTIVE_GRAPH.set(self)
        recording = _RECORDING.set(True)
        try:
            yield self
        finally:
            _RECORDING.reset(recording)
            _ACTIVE_GRAPH.reset(token)

    def __len__(self) -> int:
        return len(self.nodes)

    def free(self) -> None:
        for node in self.nodes:
            if node.tensor.graph is self:
                node.tensor.graph = None
                node.tensor.node = None
                if not node.is_leaf:
                    node.tensor.requires_grad = False
        self.nodes.clear()
        self._leaf_index.clear()
        self._grad_cache.clear()

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.graph is self or tensor.requires_grad

    def node_of(self, tensor: Tensor, register: bool = True) -> Optional[int]:
        """Node index of ``tensor``; leaves requiring grad are registered on first use."""
        if tensor.graph is self:
            return tensor.node
        index = self._leaf_index.get(id(tensor))
        if index is not None:
            return index
        if not (tensor.requires_grad and register):
            return None
        index = len(self.nodes)
        self.nodes.append(Node(op=None, inputs=(), tensor=tensor))
        self._leaf_index[id(tensor)] = index
        return index

    def record(self, op: "Primitive", inputs: Sequence[Tensor], output: Tensor, meta: Dict[str, Any]) -> None:
        input_ids = []
        for tensor in inputs:
            index = self.node_of(tensor)
            input_ids.append(-1 if index is None else index)
        output.graph = self
        output.node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op=op, inputs=tuple(input_ids), tensor=output, args=tuple(inputs), meta=dict(meta)))

    def backward(self, output: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> List[Tensor]:
        """
        Reverse-mode gradients of a scalar ``output`` with respect to ``wrt``.

        Args:
            output: Scalar tensor recorded in this graph
            wrt: Tensors (leaves or intermediate nodes) to differentiate against
            create_graph: Record the gradient computation so it can be
                differentiated again (needed for Hessian-vector products)

        Returns:
            One gradient per ``wrt`` entry with the same shape. A target that
            the output does not depend on gets a zero tensor with
            ``unreachable`` set.
        """
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")

        out_index = self.node_of(output, register=False)
        wrt_index = [self.node_of(tensor, register=False) for tensor in wrt]

        cached = [self._grad_cache.get((out_index, index)) if out_index is not None else None
                  for index in wrt_index]
        if out_index is not None and all(c is not None for c in cached):
            return list(cached)

        grads: Dict[int, Tensor] = {}
        targets = {index for index in wrt_index if index is not None and out_index is not None and index <= out_index}
        if targets:
            grads = self._propagate(output, out_index, targets, create_graph)

        results: List[Tensor] = []
        for tensor, index in zip(wrt, wrt_index):
            grad = grads.get(index) if index is not None else None
            if grad is None:
                logger.warning("backward: target of shape %s is unreachable from the output", tensor.shape)
                grad = Tensor.zeros(tensor.shape)
                grad.unreachable = True
                self.unreachable.append(grad)
            elif create_graph and out_index is not None:
                self._grad_cache[(out_index, index)] = grad
            results.append(grad)
        return results

    def _propagate(self, output: Tensor, out_index: int, targets: set, create_graph: bool) -> Dict[int, Tensor]:
        from . import ops

        start = min(targets)
        depends = np.zeros(out_index + 1, dtype=bool)
        for index in range(start, out_index + 1):
            if index in targets:
                depends[index] = True
                continue
            node = self.nodes[index]
            depends[index] = any(0 <= j and j >= start and depends[j] for j in node.inputs)
        if not depends[out_index]:
            return {}

        grads: Dict[int, Tensor] = {out_index: Tensor.ones(output.shape)}
        token = _RECORDING.set(create_graph)
        token_graph = _ACTIVE_GRAPH.set(self)
        try:
            for index in range(out_index, start - 1, -1):
                if not depends[index] or index not in grads:
                    continue
                node = self.nodes[index]
                if node.is_leaf:
                    continue
                needed = [j >= start and bool(depends[j]) for j in node.inputs]
                if not any(needed):
                    continue
                input_grads = node.op.vjp(node.args, node.tensor, grads[index], needed, **node.meta)
                for j, flag, grad in zip(node.inputs, needed, input_grads):
                    if not flag or grad is None:
                        continue
                    grads[j] = grad if j not in grads else ops.add(grads[j], grad)
        finally:
            _ACTIVE_GRAPH.reset(token_graph)
            _RECORDING.reset(token)
        return {index: grads[index] for index in targets if index in grads}
