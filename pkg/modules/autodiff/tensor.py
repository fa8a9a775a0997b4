from __future__ import annotations

from typing import TYPE_CHECKING, Any, Optional, Sequence, Tuple, Union

import numpy as np

if TYPE_CHECKING:
    from .graph import Graph


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError, ValueError):
    """Inputs of an operation have incompatible shapes."""


class NumericalError(AutodiffError, ArithmeticError):
    """A tensor or an operation result contains NaN or Inf."""


ArrayLike = Union["Tensor", np.ndarray, Sequence[Any], float, int]


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {where}")


class Tensor:
    """
    n-dimensional float64 array that can participate in a computation graph.

    The payload is read-only; optimizers rebind it through :meth:`assign`.
    A tensor produced by a recorded operation carries ``graph``/``node`` so
    the graph can find it again during differentiation.
    """

    __slots__ = ("data", "requires_grad", "graph", "node", "unreachable", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        _check_finite(array, f"tensor {name or ''}".strip())
        array.flags.writeable = False
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.graph: Optional["Graph"] = None
        self.node: Optional[int] = None
        self.unreachable = False
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # Op outputs: already float64 and checked by the caller.
        tensor = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=np.float64)
        array.flags.writeable = False
        tensor.data = array
        tensor.requires_grad = False
        tensor.graph = None
        tensor.node = None
        tensor.unreachable = False
        tensor.name = None
        return tensor

    @classmethod
    def constant(cls, data: ArrayLike) -> "Tensor":
        return cls(data, requires_grad=False)

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @classmethod
    def ones(cls, shape: Tuple[int, ...]) -> "Tensor":
        return cls._wrap(np.ones(shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        """Return a graph-free tensor sharing the (read-only) payload."""
        return Tensor._wrap(self.data)

    def assign(self, values: ArrayLike) -> None:
        """Rebind the payload in place of an optimizer update."""
        array = np.array(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
        if array.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {array.shape} to tensor of shape {self.shape}")
        _check_finite(array, f"assignment to {self.name or 'tensor'}")
        array.flags.writeable = False
        self.data = array

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.add(self, _as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.add(_as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.subtract(self, _as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.subtract(_as_tensor(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.multiply(self, _as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / float(other))
        return ops.divide(self, _as_tensor(other))

    def __neg__(self) -> "Tensor":
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        from . import ops
        return ops.matmul(self, _as_tensor(other))


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.constant(value)
