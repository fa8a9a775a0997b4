from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import ops
from .graph import Graph, no_grad
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


def backward(graph: Graph, output: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> List[Tensor]:
    """Gradients of the scalar ``output`` with respect to each of ``wrt``."""
    return graph.backward(output, wrt, create_graph=create_graph)


def hvp(graph: Graph, loss: Tensor, params: Tensor, vector: Tensor) -> Tensor:
    """
    Hessian-vector product H·v of ``loss`` at ``params``.

    Computed by double backpropagation: the gradient of ``dot(grad, v)``
    with respect to ``params``.

    Args:
        graph: Graph the loss was recorded in (must still be open)
        loss: Scalar loss tensor
        params: Tensor the Hessian is taken with respect to
        vector: Direction, same shape as ``params``

    Returns:
        Tensor of the same shape as ``params``
    """
    if vector.shape != params.shape:
        raise ShapeError(f"hvp: vector shape {vector.shape} differs from params shape {params.shape}")
    (grad,) = graph.backward(loss, [params], create_graph=True)
    with graph.recording():
        directional = ops.dot(grad, vector.detach())
    (result,) = graph.backward(directional, [params], create_graph=True)
    return result


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""
    analytic: List[np.ndarray]
    numeric: List[np.ndarray]
    errors: List[np.ndarray]
    excluded: List[Tuple[int, Tuple[int, ...]]] = field(default_factory=list)
    rtol: float = 1e-4
    step: float = 1e-5

    @property
    def max_rel_error(self) -> float:
        values = [float(e.max()) for e in self.errors if e.size]
        return max(values) if values else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rtol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rtol: float = 1e-4,
    step: float = 1e-5,
    kink_tolerance: float = 1e-2,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of ``f`` with central finite differences.

    Elements where the forward and backward one-sided differences disagree
    by more than ``kink_tolerance`` sit on a non-differentiable point (a relu
    kink, for instance). They are listed in ``excluded`` and carry error 0.
    """
    if step <= 0:
        raise ValueError("grad_check step must be positive")
    base = [np.array(t.data) for t in inputs]

    leaves = [Tensor(value, requires_grad=True) for value in base]
    with Graph() as graph:
        out = f(*leaves)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        analytic = [g.numpy() for g in graph.backward(out, leaves, create_graph=False)]

    def evaluate(index: int, values: np.ndarray) -> float:
        args = [Tensor(values if i == index else b) for i, b in enumerate(base)]
        with no_grad():
            return f(*args).item()

    f0 = evaluate(-1, base[0]) if base else 0.0
    numeric: List[np.ndarray] = []
    errors: List[np.ndarray] = []
    excluded: List[Tuple[int, Tuple[int, ...]]] = []
    for index, value in enumerate(base):
        num = np.zeros_like(value)
        err = np.zeros_like(value)
        for position in np.ndindex(value.shape):
            shifted = value.copy()
            shifted[position] = value[position] + step
            f_plus = evaluate(index, shifted)
            shifted[position] = value[position] - step
            f_minus = evaluate(index, shifted)
            forward, backward_ = (f_plus - f0) / step, (f0 - f_minus) / step
            num[position] = (f_plus - f_minus) / (2 * step)
            if abs(forward - backward_) > kink_tolerance * max(1.0, abs(num[position])):
                excluded.append((index, position))
                continue
            err[position] = relative_error(analytic[index][position], num[position])
        numeric.append(num)
        errors.append(err)

    report = GradCheckReport(analytic, numeric, errors, excluded, rtol=rtol, step=step)
    if excluded:
        logger.debug(f"grad_check excluded {len(excluded)} non-differentiable points")
    return report
