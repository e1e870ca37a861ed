"""
Dense Tensor Arithmetic with Reverse-Mode Differentiation

Every operation produces a fresh float64 ``Tensor`` and, when any operand
requires gradients, records a ``Function`` context holding its parents and the
forward values needed for the backward pass. ``Graph`` orders the recorded
nodes topologically; ``backward`` walks that order in reverse and returns
gradients keyed by parameter name without touching the forward values, so
repeated calls on the same graph give identical results.
"""

import logging
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from resident.exceptions import ContractViolation

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(part, (int, np.integer, slice)) or part is None or part is Ellipsis
        for part in parts
    )


class Tensor:
    """A dense float64 array that remembers the operation that produced it."""

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, ctx: Optional["Function"] = None
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._ctx = ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _axes(axis) -> Tuple[int, ...]:
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


class Function:
    """
    One recorded operation.

    Subclasses implement ``forward`` on raw arrays (saving whatever the
    backward pass needs on ``self``) and ``backward``, which maps the output
    gradient to one gradient per parent, or None for parents without one.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        parents = tuple(as_tensor(x) for x in inputs)
        ctx = cls(*parents)
        out = ctx.forward(*(p.data for p in parents), **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, ctx=ctx if requires_grad else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            _unbroadcast(grad / self.b, self.a.shape),
            _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    """Matrix product over the last two axes, leading axes broadcast."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ContractViolation(
                f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ContractViolation(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = None if axis is None else tuple(ax % a.ndim for ax in _axes(axis))
        self.keepdims = keepdims
        return np.sum(a, axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape = a.shape
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape)
        if _is_basic_index(self.index):
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        moved = np.moveaxis(grad, self.axis, 0)
        return tuple(moved[i] for i in range(moved.shape[0]))


class Tanh(Function):
    def forward(self, a):
        self.y = np.tanh(a)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


class Sigmoid(Function):
    def forward(self, a):
        e = np.exp(-np.abs(a))
        self.y = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


class Graph:
    """
    Topologically ordered record of the operations behind one or more outputs.

    Nodes appear after all of their inputs. The graph only reads the tensors it
    records; building several graphs over the same outputs is safe.
    """

    def __init__(self, *outputs: Tensor):
        if not outputs:
            raise ContractViolation("a graph needs at least one output")
        self.outputs = outputs
        self.nodes: List[Tensor] = []
        self._index: Dict[int, int] = {}

        seen = set()
        for output in outputs:
            stack_ = [(output, False)]
            while stack_:
                node, expanded = stack_.pop()
                key = id(node)
                if expanded:
                    self._index[key] = len(self.nodes)
                    self.nodes.append(node)
                    continue
                if key in seen:
                    continue
                seen.add(key)
                stack_.append((node, True))
                if node._ctx is not None:
                    for parent in node._ctx.parents:
                        if id(parent) not in seen:
                            stack_.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._index

    def index(self, tensor: Tensor) -> int:
        try:
            return self._index[id(tensor)]
        except KeyError:
            raise ContractViolation("tensor is not part of this graph") from None

    def parameters(self) -> List[Parameter]:
        return [node for node in self.nodes if isinstance(node, Parameter)]


def backward(
    graph: Graph, loss: Tensor, parameters: Optional[Iterable[Parameter]] = None
) -> Dict[str, np.ndarray]:
    """
    Compute d(loss)/d(parameter) by reverse-mode accumulation.

    Args:
        graph: Graph containing the loss node
        loss: Scalar tensor to differentiate
        parameters: Parameters to report; defaults to every parameter in the graph

    Returns:
        Mapping from parameter name to a gradient array of the parameter's shape.
        Parameters the loss does not depend on get zeros.

    Raises:
        ContractViolation: If the loss is not a scalar, is not in the graph, or
            parameter names collide
    """
    if loss.size != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {loss.shape}")
    root = graph.index(loss)

    grads: Dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    for position in range(root, -1, -1):
        node = graph.nodes[position]
        grad = grads.get(position)
        if grad is None or node._ctx is None:
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = graph.index(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
        del grads[position]

    wanted = graph.parameters() if parameters is None else list(parameters)
    result: Dict[str, np.ndarray] = {}
    for param in wanted:
        if param.name in result:
            raise ContractViolation(f"duplicate parameter name: {param.name}")
        grad = grads.get(graph.index(param)) if param in graph else None
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        param.grad = grad
        result[param.name] = grad
    return result


def finite_difference_check(
    op: Callable[..., Tensor],
    inputs: Sequence[ArrayLike],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients of ``op`` against central differences.

    The op output is reduced to a scalar by a weighted sum with fixed weights
    drawn from ``seed``, then every entry of every input is perturbed by
    +/- eps.

    Args:
        op: Function of len(inputs) tensors returning a tensor
        inputs: Input arrays
        eps: Perturbation size
        seed: Seed for the reduction weights

    Returns:
        Max over entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12),
        or +inf when either estimate is not finite
    """
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    leaves = [Parameter(f"input{i}", a) for i, a in enumerate(arrays)]
    out = op(*leaves)
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    loss = (out * Tensor(weights)).sum()
    analytic = backward(Graph(loss), loss, leaves)

    def objective(values: List[np.ndarray]) -> float:
        return float(np.sum(op(*[Tensor(v) for v in values]).data * weights))

    worst = 0.0
    for i, base in enumerate(arrays):
        grad = analytic[f"input{i}"].reshape(-1)
        for j in range(base.size):
            values = list(arrays)
            shifted = base.copy()
            flat = shifted.reshape(-1)
            flat[j] = base.flat[j] + eps
            values[i] = shifted
            f_plus = objective(values)
            flat[j] = base.flat[j] - eps
            f_minus = objective(values)

            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = grad[j]
            if not (math.isfinite(numeric) and math.isfinite(exact)):
                return math.inf
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
            worst = max(worst, error)
    return worst
