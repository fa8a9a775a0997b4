"""
Reverse-mode automatic differentiation on float64 numpy arrays.

Backward passes are recorded with the same primitives as forward passes, so
gradients can be differentiated again (Hessian-vector products).

Example:
    from autodiff import Graph, Tensor, ops, backward

    x = Tensor([3.0], requires_grad=True)
    with Graph() as graph:
        y = ops.multiply(x, Tensor([4.0]))
        (dx,) = backward(graph, ops.reduce_sum(y), [x])
"""
from . import ops
from .functional import GradCheckReport, backward, grad_check, hvp, relative_error
from .graph import Graph, current_graph, no_grad
from .optim import SGD, Adam, Optimizer
from .tensor import AutodiffError, NumericalError, ShapeError, Tensor

__all__ = [
    "Tensor",
    "Graph",
    "ops",
    "backward",
    "hvp",
    "grad_check",
    "GradCheckReport",
    "relative_error",
    "no_grad",
    "current_graph",
    "Optimizer",
    "Adam",
    "SGD",
    "AutodiffError",
    "ShapeError",
    "NumericalError",
]
