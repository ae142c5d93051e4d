"""
Dense tensor value/gradient engine.

Float64 arrays with reverse-mode differentiation over an explicitly recorded
graph, plus a central-difference gradient checker. Every model and loss
computation in maskcls is expressed with the primitives below.
"""

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import (Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence,
                    Tuple, Union)

import numpy as np

from .errors import DomainError, GraphError, ShapeError

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 1e-7
LAYER_NORM_EPS = 1e-5

Axis = Union[None, int, Tuple[int, ...]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    def __init__(self, data: Any, requires_grad: bool = False, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None
        self._graph: Optional["Graph"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return pow_scalar(self, exponent)


@dataclass
class Node:
    """One recorded primitive application."""

    index: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Graph:
    """Primitive records in insertion (= topological) order.

    Graphs that meet in one operation are merged: the absorbed graph forwards
    to the absorbing one, so a tensor's graph is always found via resolve().
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._merged_into: Optional["Graph"] = None

    def __len__(self) -> int:
        return len(self.resolve().nodes)

    def resolve(self) -> "Graph":
        graph = self
        while graph._merged_into is not None:
            graph = graph._merged_into
        return graph

    def absorb(self, other: "Graph") -> None:
        other = other.resolve()
        if other is self:
            return
        # the two graphs share no tensors, so concatenation stays topological
        self.nodes.extend(other.nodes)
        other.nodes = []
        other._merged_into = self
        for i, node in enumerate(self.nodes):
            node.index = i

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: BackwardFn) -> Node:
        node = Node(len(self.nodes), op, tuple(inputs), output, backward_fn)
        self.nodes.append(node)
        output._node = node
        output._graph = self
        return node


_ACTIVE_GRAPH: contextvars.ContextVar = contextvars.ContextVar("maskcls_graph", default=None)
_GRAD_ENABLED: contextvars.ContextVar = contextvars.ContextVar("maskcls_grad", default=True)


@contextlib.contextmanager
def graph_scope() -> Iterator[Graph]:
    """Record every primitive evaluated in this context into a fresh Graph."""
    graph = Graph()
    token = _ACTIVE_GRAPH.set(graph)
    try:
        yield graph
    finally:
        _ACTIVE_GRAPH.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate primitives without recording anything."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return bool(_GRAD_ENABLED.get())


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, copy=False)


def _graph_for(inputs: Sequence[Tensor]) -> Graph:
    active = _ACTIVE_GRAPH.get()
    owned = [t._graph.resolve() for t in inputs if t._graph is not None]
    if active is not None:
        target = active.resolve()
    elif owned:
        target = owned[0]
    else:
        target = Graph()
    for graph in owned:
        target.absorb(graph)
    return target


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced non-finite values")
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, copy=False)
    if track:
        _graph_for(inputs).record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions that broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    stretched = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if stretched:
        grad = grad.sum(axis=stretched, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _check_axis_nonempty(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise DomainError(f"{op} over an empty axis (shape {x.shape}, axis {axis})")
    return axis


# ----------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div by zero")
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Any) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Any, c: float) -> Tensor:
    """Multiply by a plain constant (no gradient flows to ``c``)."""
    x = as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def pow_scalar(x: Any, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if not p.is_integer() and np.any(x.data < 0):
        raise DomainError(f"pow with non-integer exponent {p} on negative values")
    if p < 1 and np.any(x.data == 0):
        raise DomainError(f"pow with exponent {p} at zero")
    return _emit("pow", x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def broadcast_add_bias(x: Any, b: Any, axis: int = -1) -> Tensor:
    """Add a 1-d bias along ``axis`` of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    axis = _check_axis_nonempty("broadcast_add_bias", x, axis)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"broadcast_add_bias: bias shape {b.shape} does not match "
                         f"axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _emit("broadcast_add_bias", x.data + b.data.reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=others)))


# ----------------------------------------------------------------------------
# nonlinearities

def relu(x: Any) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _emit("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x: Any) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Any) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Any) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise DomainError("log of an empty tensor")
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min():.3e})")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x: Any, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Any, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis_nonempty("softmax", x, axis)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), _backward)


def log_softmax(x: Any, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis_nonempty("log_softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), _backward)


def layer_norm(x: Any, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = as_tensor(x)
    axis = _check_axis_nonempty("layer_norm", x, axis)
    mu = x.data.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=axis, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std

    def _backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _emit("layer_norm", xhat, (x,), _backward)


# ----------------------------------------------------------------------------
# reductions and shape plumbing

def sum(x: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), _backward)


def mean(x: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise DomainError(f"mean over an empty selection of shape {x.shape}")

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), _backward)


def reshape(x: Any, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Any, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(perm))
    return _emit("transpose", np.transpose(x.data, perm), (x,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        shapes = [p.shape for p in parts]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Any, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries of a 1-d index list along ``axis``."""
    x = as_tensor(x)
    axis = _check_axis_nonempty("take", x, axis)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"take: indices out of range for axis {axis} of size {x.shape[axis]}")

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit("take", np.take(x.data, idx, axis=axis), (x,), _backward)


def matmul(a: Any, b: Any) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


# ----------------------------------------------------------------------------
# spatial ops on (N, C, H, W)

def conv2d(x: Any, weight: Any, stride: int = 1) -> Tensor:
    """Cross-correlation with a square 1x1 (pad 0) or 3x3 (pad 1) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) input and (O,C,k,k) kernel, "
                         f"got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != c or kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel {weight.shape} does not fit input {x.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    k, pad = kh, kh // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    kernel = weight.data.reshape(out_ch, c * k * k)
    out = (cols @ kernel.T).reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        grad_w = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ kernel).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pad:pad + h, pad:pad + w], grad_w

    return _emit(f"conv2d_{k}x{k}", np.ascontiguousarray(out), (x, weight), _backward)


def conv2d_3x3(x: Any, weight: Any, stride: int = 1) -> Tensor:
    if as_tensor(weight).shape[-1] != 3:
        raise ShapeError("conv2d_3x3 needs a 3x3 kernel")
    return conv2d(x, weight, stride=stride)


def conv2d_1x1(x: Any, weight: Any) -> Tensor:
    if as_tensor(weight).shape[-1] != 1:
        raise ShapeError("conv2d_1x1 needs a 1x1 kernel")
    return conv2d(x, weight, stride=1)


def upsample_nearest_2x(x: Any) -> Tensor:
    """Repeat every entry of the last two axes twice."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample_nearest_2x needs >= 2 axes, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def _backward(g):
        h, w = x.shape[-2:]
        return (g.reshape(*x.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return _emit("upsample_nearest_2x", out, (x,), _backward)


def avg_pool_2x2(x: Any) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial dims, got {x.shape}")
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    out = x.data.reshape(*x.shape[:-2], h, 2, w, 2).mean(axis=(-3, -1))

    def _backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return _emit("avg_pool_2x2", out, (x,), _backward)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv2d_3x3": conv2d_3x3,
    "conv2d_1x1": conv2d_1x1,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "clamp": clamp,
    "pow": pow_scalar,
    "mean": mean,
    "sum": sum,
    "upsample_nearest_2x": upsample_nearest_2x,
    "avg_pool_2x2": avg_pool_2x2,
    "layer_norm": layer_norm,
    "scale_by_constant": scale,
    "concat": concat,
    "transpose": transpose,
    "reshape": reshape,
    "take": take,
    "broadcast_add_bias": broadcast_add_bias,
}


def primitive(op_kind: str, *inputs: Any, **kwargs: Any) -> Tensor:
    """Apply a primitive by name.

    Args:
        op_kind: Key of PRIMITIVES
        *inputs: Operand tensors (concat takes a single list)
        **kwargs: Op parameters (axis, stride, constant, ...)

    Returns:
        Output tensor, recorded in the active graph when any input requires grad
    """
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"Unknown primitive: {op_kind}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# differentiation

def backward(loss: Tensor, graph: Optional[Graph] = None,
             accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Args:
        loss: Scalar tensor produced by the graph
        graph: Graph to sweep (defaults to the loss's own graph)
        accumulate: Also add each leaf gradient into ``leaf.grad``

    Returns:
        Mapping from every requires_grad leaf reached to d(loss)/d(leaf)
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        leaves = {loss: seed}
    else:
        graph = (graph or loss._graph).resolve()
        if loss._graph.resolve() is not graph:
            raise GraphError("loss was not produced by the given graph")
        grads: Dict[int, np.ndarray] = {id(loss): seed}
        leaf_refs: Dict[int, Tensor] = {}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            if len(input_grads) != len(node.inputs):
                raise GraphError(f"{node.op} returned {len(input_grads)} gradients "
                                 f"for {len(node.inputs)} inputs")
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
                if inp._node is None:
                    leaf_refs[key] = inp
        leaves = {leaf_refs[key]: grads[key] for key in leaf_refs}
        stranded = set(grads) - set(leaf_refs)
        if stranded:
            raise GraphError(f"{len(stranded)} gradients never reached a leaf; "
                             f"graph order is corrupt")
    if accumulate:
        for leaf, g in leaves.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def _scalar_value(value: Tensor, where: str) -> float:
    if value.size != 1:
        raise GraphError(f"{where}: function must return a scalar, got shape {value.shape}")
    out = float(value.data.reshape(-1)[0])
    if not np.isfinite(out):
        raise DomainError(f"{where}: function value is not finite")
    return out


def grad_check(fn: Callable[[Tensor], Tensor], point: Any, h: float = 1e-5) -> float:
    """Compare the analytic gradient of ``fn`` with central differences.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if h <= 0:
        raise DomainError(f"finite-difference step must be positive, got {h}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with graph_scope():
        value = fn(x)
        _scalar_value(value, "grad_check")
        grads = backward(value, accumulate=False) if value.requires_grad else {}
    analytic = grads.get(x, np.zeros_like(base))

    numeric = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] = base[idx] + h
            f_plus = _scalar_value(fn(Tensor(shifted, copy=False)), "grad_check")
            shifted[idx] = base[idx] - h
            f_minus = _scalar_value(fn(Tensor(shifted, copy=False)), "grad_check")
            numeric[idx] = (f_plus - f_minus) / (2.0 * h)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      h: float = 1e-5, max_coords: Optional[int] = None,
                      seed: int = 0) -> Dict[str, float]:
    """Finite-difference check of a loss over a named parameter collection.

    Args:
        loss_fn: Zero-argument closure computing the scalar loss from ``params``
        params: Named leaf tensors (requires_grad=True)
        h: Central-difference step
        max_coords: Coordinates sampled per tensor (None = all)
        seed: Seed of the coordinate sampler

    Returns:
        Per-parameter max relative error
    """
    if h <= 0:
        raise DomainError(f"finite-difference step must be positive, got {h}")
    with graph_scope():
        value = loss_fn()
        _scalar_value(value, "grad_check_params")
        grads = backward(value, accumulate=False)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    with no_grad():
        for name, tensor in params.items():
            analytic = grads.get(tensor, np.zeros_like(tensor.data))
            original = tensor.data
            flat_count = original.size
            coords = np.arange(flat_count)
            if max_coords is not None and flat_count > max_coords:
                coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
            worst = 0.0
            try:
                for flat in coords:
                    idx = np.unravel_index(flat, original.shape)
                    shifted = original.copy()
                    shifted[idx] += h
                    tensor.data = shifted
                    f_plus = _scalar_value(loss_fn(), "grad_check_params")
                    shifted = original.copy()
                    shifted[idx] -= h
                    tensor.data = shifted
                    f_minus = _scalar_value(loss_fn(), "grad_check_params")
                    numeric = (f_plus - f_minus) / (2.0 * h)
                    worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
            finally:
                tensor.data = original
            errors[name] = float(worst)
            logger.debug(f"grad_check {name}: max rel err {worst:.3e} over {len(coords)} coords")
    return errors
