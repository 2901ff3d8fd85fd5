"""
Dense tensor arithmetic with reverse-mode differentiation.

Tensors wrap contiguous row-major numpy arrays. Every operation below records
its parents and a backward closure while gradients are enabled; `backward`
walks the recorded graph once in reverse topological order and accumulates
gradients into leaf tensors (trainable Parameters and inputs created with
``requires_grad=True``).

Forward compute runs in float32. `precision(np.float64)` switches tensor
creation to float64, which is what `finite_diff_check` uses.
"""
import contextlib
import logging
import math
import threading
import zlib
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigurationError, DimensionError, ShapeError, UsageError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
Shape = Tuple[int, ...]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def get_dtype():
    """Return the dtype new tensors are created with."""
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block."""
    previous = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """N-dimensional float grid with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @staticmethod
    def _result(data: np.ndarray, parents: Tuple["Tensor", ...], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data)
        tracked = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out.grad = None
        out._parents = parents if tracked else ()
        out._backward = backward if tracked else None
        out._op = op
        out._consumed = False
        return out

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf" or isinstance(self, Parameter)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only defined by scalars")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A leaf tensor owned by a Module; trainable parameters receive gradients."""

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state.dtype))


def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("add", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("sub", a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _broadcast_check("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    c = x.data.dtype.type(factor)

    def backward(g):
        return (g * c,)

    return Tensor._result(x.data * c, (x,), backward, "scale")


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    c = math.sqrt(2.0 / math.pi)
    d = x.data
    inner = c * (d + 0.044715 * d ** 3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        deriv = 0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * d * d)
        return (g * deriv,)

    return Tensor._result(out.astype(d.dtype), (x,), backward, "gelu")


# Reductions and layout

def sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}")

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._result(x.data.transpose(axes), (x,), backward, "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return Tensor._result(out, (x,), backward, "broadcast_to")


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gain``/``bias``."""
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layernorm needs a non-empty last axis")
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layernorm {name} has shape {p.shape}, expected ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        gxhat = g * gain.data if gain is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx if x.requires_grad else None]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._result(out.astype(x.dtype), parents, backward, "layernorm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [n, in] and ``weight`` [out, in]."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise channel mixing of a channel-first grid [C_in, ...]."""
    if w.ndim != 2 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv1x1: input {x.shape} has {x.shape[0]} channels, weight {w.shape}")
    spatial = x.shape[1:]
    flat = reshape(x, (x.shape[0], int(np.prod(spatial, dtype=np.int64))))
    out = matmul(w, flat)
    if b is not None:
        out = add(out, reshape(b, (w.shape[0], 1)))
    return reshape(out, (w.shape[0],) + spatial)


def same_padding(kernel: int) -> Tuple[int, int]:
    """(low, high) padding: total kernel - 1, floor at the low end."""
    total = kernel - 1
    return total // 2, total - total // 2


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: Sequence[int] = (1, 1, 1)) -> Tensor:
    """
    Same-padded 3-D cross-correlation.

    The strided windows are gathered once into a column matrix so the
    forward pass is a single GEMM and the backward pass two.

    Args:
        x: input [C_in, T, H, W]
        w: kernel [C_out, C_in, kt, kh, kw]
        b: bias [C_out] or None
        stride: per-axis stride; output extent is ceil(extent / stride)

    Returns:
        Tensor [C_out, ceil(T/st), ceil(H/sh), ceil(W/sw)]
    """
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or any(s <= 0 for s in stride):
        raise ConfigurationError(f"conv3d stride must be three positive integers, got {stride}")
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d expects x [C,T,H,W] and w [O,C,kt,kh,kw], got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv3d: input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv3d bias {b.shape} does not match {w.shape[0]} output channels")
    c_in = x.shape[0]
    c_out = w.shape[0]
    kernel = w.shape[2:]
    extents = x.shape[1:]
    if any(e < 1 for e in extents):
        raise ShapeError(f"conv3d input {x.shape} is empty")
    pads = [same_padding(k) for k in kernel]
    padded = np.pad(x.data, ((0, 0),) + tuple(pads))
    out_ext = tuple((e - 1) // s + 1 for e, s in zip(extents, stride))
    sites = int(np.prod(out_ext))
    taps = int(np.prod(kernel))
    st, sh, sw = stride

    # [C_in, oT, oH, oW, kt, kh, kw] -> [C_in*kt*kh*kw, sites]
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=(1, 2, 3))[:, ::st, ::sh, ::sw]
    cols = windows.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * taps, sites)
    w2d = w.data.reshape(c_out, c_in * taps)
    out = w2d @ cols
    if b is not None:
        out += b.data[:, None]
    parents = tuple(t for t in (x, w, b) if t is not None)

    def backward(g):
        gf = g.reshape(c_out, sites)
        gw = (gf @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2d.T @ gf).reshape((c_in,) + tuple(kernel) + out_ext)
            gpad = np.zeros_like(padded)
            for dt in range(kernel[0]):
                for dh in range(kernel[1]):
                    for dw in range(kernel[2]):
                        gpad[:, dt:dt + st * (out_ext[0] - 1) + 1:st,
                             dh:dh + sh * (out_ext[1] - 1) + 1:sh,
                             dw:dw + sw * (out_ext[2] - 1) + 1:sw] += gcols[:, dt, dh, dw]
            gx = gpad[:, pads[0][0]:pads[0][0] + extents[0],
                      pads[1][0]:pads[1][0] + extents[1],
                      pads[2][0]:pads[2][0] + extents[2]]
        grads = [gx, gw]
        if b is not None:
            grads.append(gf.sum(axis=1) if b.requires_grad else None)
        return tuple(grads)

    return Tensor._result(out.reshape((c_out,) + out_ext), parents, backward, "conv3d")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention over token matrices [n, d]."""
    if heads < 1 or q.shape[-1] % heads or v.shape[-1] % heads:
        raise ConfigurationError(f"{heads} heads do not divide widths {q.shape[-1]} / {v.shape[-1]}")
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects token matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    n, d = q.shape
    m, dv = v.shape
    dh = d // heads
    qh = permute(reshape(q, (n, heads, dh)), (1, 0, 2))
    kh = permute(reshape(k, (m, heads, dh)), (1, 2, 0))
    vh = permute(reshape(v, (m, heads, dv // heads)), (1, 0, 2))
    weights = softmax(scale(matmul(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
    out = matmul(weights, vh)
    return reshape(permute(out, (1, 0, 2)), (n, dv))


# Patch layout

def _as_video_layout(shape: Shape, patch: Sequence[int]) -> Tuple[Shape, Tuple[int, int, int]]:
    if len(shape) == 3 and len(patch) == 2:
        return (shape[0], 1, shape[1], shape[2]), (1, patch[0], patch[1])
    if len(shape) == 4 and len(patch) == 3:
        return tuple(shape), tuple(patch)
    raise ShapeError(f"patch {tuple(patch)} does not fit a grid of shape {tuple(shape)}")


def patchify(x: Tensor, patch: Sequence[int]) -> Tensor:
    """
    Cut a channel-first grid into patch tokens.

    [C, T, H, W] with patch (pt, ph, pw), or [C, H, W] with patch (ph, pw),
    becomes [N, C*pt*ph*pw] with tokens in (t, h, w) row-major order.
    """
    (c, t, h, w), (pt, ph, pw) = _as_video_layout(x.shape, patch)
    if min(pt, ph, pw) < 1 or t % pt or h % ph or w % pw:
        raise ShapeError(f"patch {tuple(patch)} does not divide grid {x.shape}")
    grid = reshape(x, (c, t // pt, pt, h // ph, ph, w // pw, pw))
    grid = permute(grid, (1, 3, 5, 0, 2, 4, 6))
    return reshape(grid, ((t // pt) * (h // ph) * (w // pw), c * pt * ph * pw))


def unpatchify(tokens: Tensor, shape: Sequence[int], patch: Sequence[int]) -> Tensor:
    """Inverse of `patchify` back to a grid of ``shape``."""
    shape = tuple(shape)
    (c, t, h, w), (pt, ph, pw) = _as_video_layout(shape, patch)
    if t % pt or h % ph or w % pw:
        raise ShapeError(f"patch {tuple(patch)} does not divide grid {shape}")
    expected = ((t // pt) * (h // ph) * (w // pw), c * pt * ph * pw)
    if tokens.shape != expected:
        raise ShapeError(f"{tokens.shape} tokens cannot form grid {shape} with patch {tuple(patch)}")
    grid = reshape(tokens, (t // pt, h // ph, w // pw, c, pt, ph, pw))
    grid = permute(grid, (3, 0, 4, 1, 5, 2, 6))
    return reshape(grid, shape)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """Depth-to-space over the last two axes: [C*r*r, T, h, w] -> [C, T, h*r, w*r]."""
    if x.ndim != 4 or x.shape[0] % (factor * factor):
        raise ShapeError(f"pixel_shuffle by {factor} cannot split {x.shape}")
    c = x.shape[0] // (factor * factor)
    _, t, h, w = x.shape
    grid = reshape(x, (c, factor, factor, t, h, w))
    grid = permute(grid, (0, 3, 4, 1, 5, 2))
    return reshape(grid, (c, t, h * factor, w * factor))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# Graph traversal

class ComputeGraph:
    """Operations reachable from a scalar loss, in topological order."""

    def __init__(self, loss: Tensor):
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._consumed:
            raise UsageError("graph already consumed by a previous backward(); run a fresh forward pass")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires a gradient")
        self.loss = loss
        self.nodes = self._topological_order(loss)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self):
        grads: Dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    if node.grad is None or node.grad.shape != node.shape:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g.astype(node.grad.dtype, copy=False)
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self.loss._consumed = True


def backward(loss: Tensor) -> ComputeGraph:
    """Populate gradients of every leaf reachable from ``loss``."""
    graph = ComputeGraph(loss)
    graph.backward()
    return graph


# Modules

class Module:
    """Container of Parameters and sub-modules, discovered through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.trainable = True
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: "SeededRng", bias: bool = True,
                 std: Optional[float] = None, trainable: bool = True):
        std = 1.0 / math.sqrt(in_features) if std is None else std
        self.weight = Parameter(rng.normal((out_features, in_features), std=std), trainable=trainable)
        self.bias = Parameter(np.zeros(out_features), trainable=trainable) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class AdamW:
    """
    Adaptive-moment optimizer with decoupled weight decay.

    Parameters are updated in the order they were given, which is the
    module's attribute order, so repeated runs are bit-identical.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.steps += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0:
                continue
            m_hat = m / (1.0 - self.beta1 ** self.steps)
            v_hat = v / (1.0 - self.beta2 ** self.steps)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def state(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(m.copy(), v.copy()) for m, v in zip(self.m, self.v)]

    def load_state(self, state: List[Tuple[np.ndarray, np.ndarray]], steps: int):
        self.m = [m.copy() for m, _ in state]
        self.v = [v.copy() for _, v in state]
        self.steps = steps


class SeededRng:
    """
    Named deterministic random stream.

    Draws come from numpy's Philox4x64 counter-based generator keyed by a
    SeedSequence built from (seed, crc32(name)), so a (seed, name) pair yields
    the same stream on every platform.
    """

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.name = name
        entropy = [self.seed] + ([zlib.crc32(name.encode("utf-8"))] if name else [])
        self._generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.name}/{name}" if self.name else name)

    @property
    def position(self) -> int:
        """Philox counter word, i.e. how far the stream has advanced."""
        return int(self._generator.bit_generator.state["state"]["counter"][0])

    def normal(self, shape: Union[int, Shape] = (), std: float = 1.0, mean: float = 0.0, dtype=None) -> np.ndarray:
        draws = self._generator.standard_normal(shape)
        return (draws * std + mean).astype(dtype or _state.dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape: Union[int, Shape] = (), dtype=None) -> np.ndarray:
        return self._generator.uniform(low, high, shape).astype(dtype or np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def standard_normal(self) -> float:
        return float(self._generator.standard_normal())


def orthogonal(rng: SeededRng, n: int) -> np.ndarray:
    """Seeded orthogonal n x n matrix (QR of a Gaussian draw, sign-fixed)."""
    q, r = np.linalg.qr(rng.normal((n, n), dtype=np.float64))
    q = q * np.sign(np.diag(r))
    return q


def finite_diff_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]], h: float = 1e-4,
                      max_entries: Optional[int] = None, rng: Optional[SeededRng] = None,
                      corrupt: float = 0.0) -> float:
    """
    Compare backward() against central differences in float64.

    Args:
        f: pure function of the tensors in ``x`` returning a scalar Tensor
        x: tensor or tensors to differentiate with respect to (perturbed in place)
        h: finite-difference step
        max_entries: check at most this many entries per tensor (sampled with ``rng``)
        rng: sampler for ``max_entries``
        corrupt: test hook, scales the analytic gradient by (1 + corrupt)

    Returns:
        float: the largest per-tensor error max|analytic - numeric| divided by the
        larger of the two gradients' peak magnitudes
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    rng = rng or SeededRng(0, "finite_diff")
    worst = 0.0
    try:
        with precision(np.float64):
            for t in inputs:
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = np.zeros_like(t.data)
            loss = f(*inputs)
            if loss.size != 1:
                raise UsageError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
            base = abs(loss.item())
            backward(loss)
            analytic = [t.grad.copy() * (1.0 + corrupt) for t in inputs]
            with no_grad():
                for t, grad in zip(inputs, analytic):
                    flat = t.data.reshape(-1)
                    if max_entries is not None and flat.size > max_entries:
                        picks = np.sort(rng.choice(flat.size, max_entries))
                    else:
                        picks = np.arange(flat.size)
                    numeric = np.zeros(len(picks))
                    for n, i in enumerate(picks):
                        original = flat[i]
                        flat[i] = original + h
                        plus = f(*inputs).item()
                        flat[i] = original - h
                        minus = f(*inputs).item()
                        flat[i] = original
                        numeric[n] = (plus - minus) / (2.0 * h)
                    chosen = grad.reshape(-1)[picks]
                    magnitude = max(np.abs(chosen).max(initial=0.0), np.abs(numeric).max(initial=0.0),
                                    1e-6 * max(1.0, base))
                    worst = max(worst, float(np.abs(chosen - numeric).max(initial=0.0) / magnitude))
    finally:
        for t, (data, flag, grad) in zip(inputs, saved):
            t.data = data
            t.requires_grad = flag
            t.grad = np.zeros_like(data) if isinstance(t, Parameter) else grad
    logger.debug(f"finite difference check: max relative error {worst:.3e}")
    return worst
