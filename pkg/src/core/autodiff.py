"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new ``Node`` holding its value and, when any input
requires a gradient, the vector-Jacobian products back to its inputs. The
graph is rebuilt on every forward pass; ``backward`` walks it once in reverse
topological order and accumulates into the ``grad`` of the leaves reached.
Leaf gradients accumulate across calls until ``zero_grad`` is called.

``stop_gradient`` returns a leaf that shares the input's value but has no
parents, so nothing upstream of it ever receives a contribution.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.exceptions import DegenerateInputError, DimensionError, ParameterError, ShapeError

Tensor = np.ndarray
VectorJacobian = Callable[[np.ndarray], np.ndarray]
Operand = Union["Node", np.ndarray, float, int]

GELU_C = float(np.sqrt(2.0 / np.pi))


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "_grad", "parents", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        parents: Sequence[Tuple["Node", VectorJacobian]] = (),
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value: Tensor = np.asarray(value, dtype=np.float64)
        self._grad: Optional[Tensor] = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: Operand) -> "Node":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Node":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Node":
        return div(self, other)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __matmul__(self, other: Operand) -> "Node":
        return matmul(self, other)

    def __getitem__(self, index) -> "Node":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Node":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Node":
        return transpose(self, axes or None)


def leaf(value, requires_grad: bool = True, name: Optional[str] = None) -> Node:
    """A graph input; parameters are leaves with ``requires_grad``."""
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    return Node(value)


def as_node(x: Operand) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _result(value: np.ndarray, parents: Sequence[Tuple[Node, VectorJacobian]]) -> Node:
    live = [(node, fn) for node, fn in parents if node.requires_grad]
    return Node(value, live, requires_grad=bool(live))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def div(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "div")
    return _result(
        a.value / b.value,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
        ],
    )


def power(x: Node, exponent: float) -> Node:
    value = x.value**exponent
    return _result(value, [(x, lambda g: g * exponent * x.value ** (exponent - 1.0))])


def exp(x: Node) -> Node:
    value = np.exp(x.value)
    return _result(value, [(x, lambda g: g * value)])


def log(x: Node) -> Node:
    return _result(np.log(x.value), [(x, lambda g: g / x.value)])


def tanh(x: Node) -> Node:
    value = np.tanh(x.value)
    return _result(value, [(x, lambda g: g * (1.0 - value * value))])


def sigmoid(x: Node) -> Node:
    value = _stable_sigmoid(x.value)
    return _result(value, [(x, lambda g: g * value * (1.0 - value))])


def gelu(x: Node) -> Node:
    """GELU, tanh approximation (smooth everywhere, so finite differences agree)."""
    v = x.value
    t = np.tanh(GELU_C * (v + 0.044715 * v**3))
    value = 0.5 * v * (1.0 + t)

    def vjp(g: np.ndarray) -> np.ndarray:
        du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)

    return _result(value, [(x, vjp)])


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# Linear algebra and shape manipulation


def matmul(a: Operand, b: Operand) -> Node:
    """Matrix product; leading axes of either operand broadcast as in numpy."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return _result(
        a.value @ b.value,
        [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)),
        ],
    )


def transpose(x: Node, axes: Optional[Sequence[int]] = None) -> Node:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.value, axes), [(x, lambda g: np.transpose(g, inverse))])


def reshape(x: Node, shape: Sequence[int]) -> Node:
    return _result(x.value.reshape(shape), [(x, lambda g: g.reshape(x.shape))])


def getitem(x: Node, index) -> Node:
    """Indexing (slices, integer arrays); the gradient scatters back with ``np.add.at``."""

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return out

    return _result(np.array(x.value[index]), [(x, vjp)])


def concat(nodes: Sequence[Operand], axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    parents = []
    for position, node in enumerate(nodes):
        parents.append((node, lambda g, p=position: np.split(g, bounds, axis=axis)[p]))
    return _result(value, parents)


def stack(nodes: Sequence[Operand], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    value = np.stack([n.value for n in nodes], axis=axis)
    parents = []
    for position, node in enumerate(nodes):
        parents.append((node, lambda g, p=position: np.take(g, p, axis=axis)))
    return _result(value, parents)


def pad(x: Node, widths: Sequence[Tuple[int, int]]) -> Node:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad: {len(widths)} width pairs for a rank-{x.ndim} tensor")
    window = tuple(slice(before, before + size) for (before, _), size in zip(widths, x.shape))
    return _result(np.pad(x.value, widths), [(x, lambda g: g[window])])


# Reductions


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return _result(value, [(x, vjp)])


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis=axis, keepdims=keepdims) / float(count)


# Normalisation and probability


def softmax_rows(x: Node, temperature: float = 1.0, mask: Optional[np.ndarray] = None) -> Node:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable to ``x``) marks the entries that take part; masked
    entries get probability exactly 0 and rows with no valid entry are all 0.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    v = x.value
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted / temperature)
        value = e / e.sum(axis=-1, keepdims=True)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        top = np.where(valid, v, -np.inf).max(axis=-1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(valid, np.exp(np.where(valid, v - top, 0.0) / temperature), 0.0)
        total = e.sum(axis=-1, keepdims=True)
        value = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def vjp(g: np.ndarray) -> np.ndarray:
        return value * (g - (g * value).sum(axis=-1, keepdims=True)) / temperature

    return _result(value, [(x, vjp)])


def log_softmax(x: Node) -> Node:
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(value)
    return _result(value, [(x, lambda g: g - probs * g.sum(axis=-1, keepdims=True))])


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(variance + eps, -0.5) * gamma + beta


def stop_gradient(x: Node) -> Node:
    """Identity forward; blocks every gradient contribution backward."""
    return Node(x.value, requires_grad=False, name=x.name)


# Losses


def weighted_sse(pred: Node, target: Node, weights: np.ndarray) -> Node:
    """sum(weights * (pred - target)**2); entries with zero weight are ignored entirely."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), pred.shape)
    active = w != 0
    diff = np.where(active, pred.value - target.value, 0.0)
    value = np.sum(w * diff * diff)
    return _result(
        np.asarray(value),
        [(pred, lambda g: 2.0 * g * w * diff), (target, lambda g: -2.0 * g * w * diff)],
    )


def masked_mse(pred: Node, target: Node, mask: np.ndarray) -> Node:
    """Mean squared error over the unmasked entries.

    The denominator is the number of unmasked entries, i.e. unmasked rows times
    the row width when the mask is row-constant.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    if not np.all((mask == 0) | (mask == 1)):
        raise ParameterError("mask entries must be 0 or 1")
    count = mask.sum()
    if count == 0:
        raise DegenerateInputError("masked_mse: every position is masked")
    return weighted_sse(pred, target, mask / count)


def bce_with_logits(logits: Node, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Node:
    """Weighted binary cross-entropy on logits, normalised by the total weight."""
    z = logits.value
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    total = w.sum()
    if total <= 0:
        raise DegenerateInputError("bce_with_logits: total weight is zero")
    per_entry = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = np.sum(w * per_entry) / total
    probs = _stable_sigmoid(z)
    return _result(np.asarray(value), [(logits, lambda g: g * w * (probs - y) / total)])


def cross_entropy(logits: Node, targets: np.ndarray) -> Node:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size == 0:
        raise DegenerateInputError("cross_entropy: no targets")
    picked = log_softmax(logits)[np.arange(targets.size), targets]
    return -mean(picked)


# Reverse pass


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack_: List[Tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Node) -> Dict[Node, Tensor]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    Returns the map from those leaves to their (accumulated) gradients.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    reached: Dict[Node, Tensor] = {}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node._grad = np.array(g) if node._grad is None else node._grad + g
                reached[node] = node._grad
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            previous = pending.get(id(parent))
            pending[id(parent)] = contribution if previous is None else previous + contribution
    return reached


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
