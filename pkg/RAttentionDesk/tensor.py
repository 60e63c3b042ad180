"""tensor.py
Dense numeric tensors with a reverse-mode gradient tape.

Operations are recorded on the active Tape (opened with `with Tape() as tape:`)
whenever one of their inputs requires a gradient. `backward(tape, loss)` then
walks the recorded nodes once, newest first, and leaves the gradient of every
leaf on its `grad` attribute."""

from __future__ import annotations
from dataclasses import dataclass
import threading
from typing import Any, Callable, Dict, List, Sequence, Tuple
import numpy as np

DEFAULT_DTYPE = np.float32
RMS_EPS = 1e-6
MASK_VALUE = -1e9  # Additive stand-in for -inf before a softmax.


class ShapeError(ValueError):
    """Tensor extents do not line up for an operation."""

    pass


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    pass


class TapeError(RuntimeError):
    """The tape cannot provide what backward was asked for."""

    pass


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    """A recorded operation. `backward` maps the output gradient to one gradient per input."""

    name: str
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    recompute: Callable[..., Any] | None = None


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    """The innermost tape opened on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations for one forward / backward pair.

    Tapes are thread-local when active, so separate threads can each run their
    own tape without sharing state."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.checkpoints: List[Callable[..., Any]] = []
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, type, value, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "Tapes must be closed in the order they were opened."

    def record(self, node: Node) -> int:
        """Appends a node and returns its handle."""
        self.nodes.append(node)
        if node.recompute is not None:
            self.checkpoints.append(node.recompute)
        return len(self.nodes) - 1

    def reset(self) -> None:
        """Clears the gradients that the last backward pass left on the leaves."""
        for leaf in self._leaves.values():
            leaf.grad = None
        self._leaves = {}


class Tensor:
    """Dense n-dimensional array of 32-bit or 64-bit reals."""

    __array_priority__ = 100  # Lets `ndarray + Tensor` reach Tensor.__radd__.

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
    ) -> None:
        """Wraps data in a tensor.

        Args:
            data (Any): Array-like values. Existing float32 / float64 arrays keep their precision.
            requires_grad (bool, optional): Whether backward should produce a gradient for this tensor. Defaults to False.
            dtype (Any, optional): Force a precision. Defaults to None.
        """
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            values = np.asarray(data)
            dtype = (
                values.dtype
                if values.dtype in (np.float32, np.float64)
                else DEFAULT_DTYPE
            )
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """A copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        return swapaxes(self, axis1, axis2)

    def sum(self, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    """Returns value unchanged if it is a tensor, otherwise wraps it (matching like's precision)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def check_finite(name: str, values: np.ndarray) -> None:
    """Raises NonFiniteError if values holds a NaN or Inf."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"'{name}' produced non-finite values.")


def record_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: BackwardFn,
    recompute: Callable[..., Any] | None = None,
) -> Tensor:
    """Wraps the result of an operation and records it on the active tape.

    Other modules use this to add fused operations with a hand-written backward.

    Args:
        name (str): Operation name used in diagnostics.
        out_data (np.ndarray): The forward result.
        inputs (Sequence[Tensor]): The tensors the result depends on.
        backward (BackwardFn): Maps the output gradient to one gradient (or None) per input.
        recompute (Callable[..., Any] | None, optional): Closure that rebuilds activations the node did not keep. Defaults to None.

    Raises:
        NonFiniteError: If out_data contains NaN or Inf.

    Returns:
        Tensor: The output tensor.
    """
    check_finite(name, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = tape.record(Node(name, tuple(inputs), backward, recompute))
        out._tape = tape
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums out the axes that broadcasting added so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"'{name}' cannot broadcast {a.shape} with {b.shape}.")


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def grad_fn(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record_op("add", a.data + b.data, (a, b), grad_fn)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record_op("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g: np.ndarray):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record_op("mul", a.data * b.data, (a, b), grad_fn)


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def grad_fn(g: np.ndarray):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return record_op("div", a.data / b.data, (a, b), grad_fn)


def _pair(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product over the last two axes.

    Raises:
        ShapeError: If either input has fewer than 2 axes, the inner extents differ or the batch extents do not broadcast.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs at least 2 axes on both sides, got {a.shape} and {b.shape}."
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape} "
            f"(axis -1 of the left is {a.shape[-1]}, axis -2 of the right is {b.shape[-2]})."
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul batch extents {a.shape[:-2]} and {b.shape[:-2]} do not broadcast."
        )

    def grad_fn(g: np.ndarray):
        grad_a = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return record_op("matmul", np.matmul(a.data, b.data), (a, b), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"Cannot reshape {x.shape} into {tuple(shape)}.")

    def grad_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    return record_op("reshape", out, (x,), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return record_op("transpose", np.transpose(x.data, axes), (x,), grad_fn)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def grad_fn(g: np.ndarray):
        return (np.swapaxes(g, axis1, axis2),)

    return record_op("swapaxes", np.swapaxes(x.data, axis1, axis2), (x,), grad_fn)


def _expand_reduced(
    g: np.ndarray, shape: Tuple[int, ...], axis: int | Tuple[int, ...] | None, keepdims: bool
) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape).copy()


def tensor_sum(
    x: Tensor, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def grad_fn(g: np.ndarray):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return record_op(
        "sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn
    )


def mean(
    x: Tensor, axis: int | Tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def grad_fn(g: np.ndarray):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return record_op("mean", out, (x,), grad_fn)


def getitem(x: Tensor, index: Any) -> Tensor:
    def grad_fn(g: np.ndarray):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record_op("getitem", np.array(x.data[index]), (x,), grad_fn)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(
        "concatenate",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        grad_fn,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def grad_fn(g: np.ndarray):
        return (g * (s + x.data * s * (1.0 - s)),)

    return record_op("silu", x.data * s, (x,), grad_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    cube = 0.044715 * x.data**3
    t = np.tanh(_GELU_C * (x.data + cube))

    def grad_fn(g: np.ndarray):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return record_op("gelu", 0.5 * x.data * (1.0 + t), (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. Entries where mask is False get MASK_VALUE added before normalising.

    Args:
        x (Tensor): Scores.
        axis (int, optional): Normalisation axis. Defaults to -1.
        mask (np.ndarray | None, optional): Boolean array broadcastable to x, True where kept. Defaults to None.

    Returns:
        Tensor: Probabilities along axis.
    """
    scores = x.data
    if mask is not None:
        scores = np.where(mask, scores, np.asarray(MASK_VALUE, dtype=x.dtype))
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", y, (x,), grad_fn)


def rms_norm(x: Tensor, scale: Tensor, eps: float = RMS_EPS) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * scale over the last axis.

    Args:
        x (Tensor): Input, normalised over its last axis.
        scale (Tensor): Gain whose last extent matches x's; leading axes broadcast (per-head scales are [h, 1, d]).
        eps (float, optional): Added to the mean square. Defaults to RMS_EPS.

    Raises:
        ShapeError: If the last extents differ.
        ValueError: If eps is not positive.

    Returns:
        Tensor: The normalised tensor.
    """
    if eps <= 0:
        raise ValueError(f"rms_norm eps must be positive, got {eps}.")
    if scale.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"rms_norm scale has last extent {scale.shape[-1]} but the input has {x.shape[-1]}."
        )
    _broadcast_shape("rms_norm", x, scale)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * r

    def grad_fn(g: np.ndarray):
        gs = g * scale.data
        grad_x = r * (gs - normed * np.mean(gs * normed, axis=-1, keepdims=True))
        grad_scale = unbroadcast(g * normed, scale.shape)
        return grad_x, grad_scale

    return record_op("rms_norm", normed * scale.data, (x, scale), grad_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of weight selected by integer ids.

    Raises:
        IndexError: If an id is outside the table.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(
            f"Token ids must lie in [0, {weight.shape[0]}), got range [{ids.min()}, {ids.max()}]."
        )

    def grad_fn(g: np.ndarray):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return record_op("embedding", weight.data[ids], (weight,), grad_fn)


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagates d(loss)/d(loss) = 1 back through the tape.

    Each node at or before the loss is visited once, newest first. Gradients
    are written to the `grad` attribute of every leaf that requires one
    (overwriting rather than accumulating, so repeated calls agree bit-for-bit).

    Args:
        tape (Tape): The tape the loss was recorded on.
        loss (Tensor): A single-element tensor.

    Raises:
        TapeError: If the loss is not a scalar or was not recorded on this tape.

    Returns:
        Dict[Tensor, np.ndarray]: Gradient for every leaf reached.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}.")
    if loss.node_id is None or loss._tape is not tape:
        raise TapeError("The loss was not recorded on this tape.")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}
    for index in range(loss.node_id, -1, -1):
        g = grads.pop(index, None)
        if g is None:
            continue
        node = tape.nodes[index]
        input_grads = node.backward(g)
        assert len(input_grads) == len(
            node.inputs
        ), f"'{node.name}' returned {len(input_grads)} gradients for {len(node.inputs)} inputs."
        for inp, grad in zip(node.inputs, input_grads):
            if grad is None or not inp.requires_grad:
                continue
            assert (
                grad.shape == inp.shape
            ), f"'{node.name}' produced a gradient of shape {grad.shape} for an input of shape {inp.shape}."
            if inp.node_id is not None and inp._tape is tape:
                previous = grads.get(inp.node_id)
                grads[inp.node_id] = grad if previous is None else previous + grad
            else:
                previous_leaf = leaf_grads.get(id(inp))
                leaf_grads[id(inp)] = (
                    inp,
                    grad if previous_leaf is None else previous_leaf[1] + grad,
                )

    result: Dict[Tensor, np.ndarray] = {}
    for leaf, grad in leaf_grads.values():
        leaf.grad = np.array(grad, copy=True)
        tape._leaves[id(leaf)] = leaf
        result[leaf] = leaf.grad
    return result
