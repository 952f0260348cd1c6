"""
Dense float64 tensors, a define-by-run reverse-mode graph, SGD with momentum,
gradient checking and the tensor snapshot format used for checkpoints.

Every op is a Function subclass: forward works on raw numpy arrays, backward
maps the output gradient to one gradient per parent. The graph is built on
each forward pass and released by backward().
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"RLSNAP01"

# gradient-check constants
REL_ERROR_FLOOR = 1e-4
KINK_TOLERANCE = 1e-3
# on a kink the analytic slope sits on one side; smooth curvature puts it midway
KINK_SIDE_FRACTION = 0.1
# a kink's slope gap survives a 10x smaller step, a curvature gap shrinks with it
KINK_STEP_SHRINK = 0.1
KINK_PERSISTENCE = 0.5


class ShapeError(ValueError):
    """Raised when operand extents do not line up"""


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot"""

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

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
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return Mean.apply(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


class Function:
    """A graph node: op tag, parent tensors and the cached forward output"""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.saved: tuple = ()
        self.output: Optional[np.ndarray] = None

    @property
    def op(self) -> str:
        return type(self).__name__

    def save_for_backward(self, *values) -> None:
        self.saved = values

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_output: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        parents = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
        ctx = cls(*parents)
        ctx.output = ctx.forward(*[p.data for p in parents], **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(ctx.output, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)


class Parameter:
    """A trainable tensor plus its momentum state"""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.momentum_buffer = Tensor(np.zeros_like(self.value.data))

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    """Centered uniform with half-width sqrt(6/(fan_in+fan_out))"""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, x, y):
        self.save_for_backward(x.shape, y.shape)
        return x + y

    def backward(self, grad_output):
        shape_x, shape_y = self.saved
        return _unbroadcast(grad_output, shape_x), _unbroadcast(grad_output, shape_y)


class Mul(Function):
    def forward(self, x, y):
        self.save_for_backward(x, y)
        return x * y

    def backward(self, grad_output):
        x, y = self.saved
        return _unbroadcast(grad_output * y, x.shape), _unbroadcast(grad_output * x, y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad_output):
        return (-grad_output,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.save_for_backward(x.shape, axis, keepdims)
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad_output):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            grad_output = np.expand_dims(grad_output, axis=axis)
        return (np.broadcast_to(grad_output, shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None):
        count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        self.save_for_backward(x.shape, axis, float(count))
        return np.mean(x, axis=axis)

    def backward(self, grad_output):
        shape, axis, count = self.saved
        if axis is not None:
            grad_output = np.expand_dims(grad_output, axis=axis)
        return (np.broadcast_to(grad_output / count, shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
        self.save_for_backward(x.shape)
        return x.reshape(shape)

    def backward(self, grad_output):
        (shape,) = self.saved
        return (grad_output.reshape(shape),)


class GetItem(Function):
    def forward(self, x, index):
        self.save_for_backward(x.shape, index)
        return np.array(x[index], dtype=np.float64)

    def backward(self, grad_output):
        shape, index = self.saved
        grad = np.zeros(shape)
        np.add.at(grad, index, grad_output)
        return (grad,)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: {x.shape} @ {y.shape} has mismatched inner extents")
        self.save_for_backward(x, y)
        return x @ y

    def backward(self, grad_output):
        x, y = self.saved
        return grad_output @ y.T, x.T @ grad_output


class Linear(Function):
    def forward(self, x, weight, bias):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        self.save_for_backward(x, weight)
        return x @ weight + bias

    def backward(self, grad_output):
        x, weight = self.saved
        return grad_output @ weight.T, x.T @ grad_output, grad_output.sum(axis=0)


class Relu(Function):
    def forward(self, x):
        mask = x > 0
        self.save_for_backward(mask)
        return np.where(mask, x, 0.0)

    def backward(self, grad_output):
        (mask,) = self.saved
        return (grad_output * mask,)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function on a plain array, overflow-free in both tails"""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, x):
        out = stable_sigmoid(x)
        self.save_for_backward(out)
        return out

    def backward(self, grad_output):
        (out,) = self.saved
        return (grad_output * out * (1.0 - out),)


class Softplus(Function):
    """log(1 + e^x), evaluated without overflow"""

    def forward(self, x):
        self.save_for_backward(x)
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(self, grad_output):
        (x,) = self.saved
        return (grad_output * stable_sigmoid(x),)


class Softmax(Function):
    def forward(self, x, axis=-1):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / np.sum(e, axis=axis, keepdims=True)
        self.save_for_backward(out, axis)
        return out

    def backward(self, grad_output):
        out, axis = self.saved
        inner = np.sum(grad_output * out, axis=axis, keepdims=True)
        return (out * (grad_output - inner),)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.save_for_backward(out, axis)
        return out

    def backward(self, grad_output):
        out, axis = self.saved
        return (grad_output - np.exp(out) * np.sum(grad_output, axis=axis, keepdims=True),)


class SmoothL1(Function):
    """Quadratic below |d| = 1, linear above"""

    def forward(self, d):
        self.save_for_backward(d)
        a = np.abs(d)
        return np.where(a < 1.0, 0.5 * d * d, a - 0.5)

    def backward(self, grad_output):
        (d,) = self.saved
        return (grad_output * np.where(np.abs(d) < 1.0, d, np.sign(d)),)


def _as_batch(x: np.ndarray, name: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"{name}: expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


class Conv2d(Function):
    """Cross-correlation; each output sums over kernel cols, then rows, then input channels innermost"""

    def forward(self, x, weight, *bias, stride=1, pad=0):
        xb, batched = _as_batch(x, "conv2d")
        n, c, h, w = xb.shape
        if weight.ndim != 4:
            raise ShapeError(f"conv2d: weight must be [C_out,C_in,k,k], got {weight.shape}")
        c_out, c_in, kh, kw = weight.shape
        if c_in != c:
            raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in} (weight {weight.shape})")
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv2d: stride {stride} / pad {pad} out of range")
        k = kh
        if h + 2 * pad < k or w + 2 * pad < k:
            raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {k}")
        if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
            raise ShapeError(
                f"conv2d: ({h}+2*{pad}-{k})/{stride} x ({w}+2*{pad}-{k})/{stride} is not integral"
            )
        if bias and bias[0].shape != (c_out,):
            raise ShapeError(f"conv2d: bias {bias[0].shape} does not match {c_out} output channels")
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, c_out, ho, wo))
        for kc in range(k):
            for kr in range(k):
                patch = xp[:, :, kr:kr + stride * (ho - 1) + 1:stride, kc:kc + stride * (wo - 1) + 1:stride]
                for ci in range(c):
                    out += weight[None, :, ci, kr, kc, None, None] * patch[:, ci:ci + 1]
        if bias:
            out += bias[0][None, :, None, None]
        self.save_for_backward(xp, weight, stride, pad, batched, bool(bias))
        return out if batched else out[0]

    def backward(self, grad_output):
        xp, weight, stride, pad, batched, has_bias = self.saved
        g = grad_output if batched else grad_output[None]
        _, _, ho, wo = g.shape
        k = weight.shape[2]
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(weight)
        for kc in range(k):
            for kr in range(k):
                rows = slice(kr, kr + stride * (ho - 1) + 1, stride)
                cols = slice(kc, kc + stride * (wo - 1) + 1, stride)
                grad_w[:, :, kr, kc] = np.einsum("nohw,nchw->oc", g, xp[:, :, rows, cols])
                grad_xp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", g, weight[:, :, kr, kc])
        h, w = xp.shape[2] - 2 * pad, xp.shape[3] - 2 * pad
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w]
        if not batched:
            grad_x = grad_x[0]
        grads = [grad_x, grad_w]
        if has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)


class Deconv2d(Function):
    """Transposed convolution with kernel extent equal to the stride; weight is [C_in,C_out,s,s]"""

    def forward(self, x, weight, *bias, stride=2):
        xb, batched = _as_batch(x, "deconv2d")
        n, c, h, w = xb.shape
        if weight.ndim != 4 or weight.shape[0] != c:
            raise ShapeError(f"deconv2d: weight {weight.shape} does not match {c} input channels")
        if weight.shape[2:] != (stride, stride):
            raise ShapeError(f"deconv2d: kernel {weight.shape[2:]} must equal stride {stride}")
        c_out = weight.shape[1]
        if bias and bias[0].shape != (c_out,):
            raise ShapeError(f"deconv2d: bias {bias[0].shape} does not match {c_out} output channels")
        out = np.zeros((n, c_out, h * stride, w * stride))
        for a in range(stride):
            for b in range(stride):
                out[:, :, a::stride, b::stride] = np.einsum("nchw,co->nohw", xb, weight[:, :, a, b])
        if bias:
            out += bias[0][None, :, None, None]
        self.save_for_backward(xb, weight, stride, batched, bool(bias))
        return out if batched else out[0]

    def backward(self, grad_output):
        xb, weight, stride, batched, has_bias = self.saved
        g = grad_output if batched else grad_output[None]
        grad_x = np.zeros_like(xb)
        grad_w = np.zeros_like(weight)
        for a in range(stride):
            for b in range(stride):
                tap = g[:, :, a::stride, b::stride]
                grad_x += np.einsum("nohw,co->nchw", tap, weight[:, :, a, b])
                grad_w[:, :, a, b] = np.einsum("nchw,nohw->co", xb, tap)
        grads = [grad_x if batched else grad_x[0], grad_w]
        if has_bias:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)


def bilinear_upsample_matrix(n: int) -> np.ndarray:
    """(2n x n) half-pixel interpolation matrix, edges clamped"""
    matrix = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    return matrix


class UpsampleBilinear2x(Function):
    def forward(self, x):
        xb, batched = _as_batch(x, "upsample_bilinear2x")
        rows = bilinear_upsample_matrix(xb.shape[2])
        cols = bilinear_upsample_matrix(xb.shape[3])
        self.save_for_backward(rows, cols, batched)
        out = np.einsum("ij,ncjk,lk->ncil", rows, xb, cols)
        return out if batched else out[0]

    def backward(self, grad_output):
        rows, cols, batched = self.saved
        g = grad_output if batched else grad_output[None]
        grad = np.einsum("ij,ncil,lk->ncjk", rows, g, cols)
        return (grad if batched else grad[0],)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, pad=pad)
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    if bias is None:
        return Deconv2d.apply(x, weight, stride=stride)
    return Deconv2d.apply(x, weight, bias, stride=stride)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    return MatMul.apply(x, y)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    return LogSoftmax.apply(x, axis=axis)


def smooth_l1(d: Tensor) -> Tensor:
    return SmoothL1.apply(d)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    return UpsampleBilinear2x.apply(x)


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
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Optional[Iterable[Parameter]] = None) -> None:
    """Populate .grad of every reachable leaf; listed parameters start from zero"""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if parameters is not None:
        for p in parameters:
            p.zero_grad()
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        ctx = node._ctx
        for parent, parent_grad in zip(ctx.parents, ctx.backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(f"{ctx.op}: gradient shape {parent_grad.shape} != input shape {parent.shape}")
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        node._ctx = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float, weight_decay: float) -> None:
    """buffer <- momentum*buffer + grad + weight_decay*value; value <- value - lr*buffer"""
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name} has no gradient")
        buf = momentum * p.momentum_buffer.data + p.grad + weight_decay * p.value.data
        p.momentum_buffer.data = buf
        p.value.data -= lr * buf


@dataclass
class GradCheckReport:
    """Outcome of a central-difference comparison for one tensor"""

    max_rel_error: float = 0.0
    worst_index: Optional[Tuple[int, ...]] = None
    checked: int = 0
    excluded: List[Tuple[int, ...]] = field(default_factory=list)

    def passed(self, tolerance: float = 1e-6) -> bool:
        return self.checked > 0 and self.max_rel_error < tolerance


def _slope_gap(graph: Callable[[], Tensor], data: np.ndarray, index: Tuple[int, ...], f0: float,
               step: float) -> float:
    original = data[index]
    data[index] = original + step
    f_plus = graph().item()
    data[index] = original - step
    f_minus = graph().item()
    data[index] = original
    return abs((f_plus - f0) - (f0 - f_minus)) / step


def check_gradients(graph: Callable[[], Tensor], param: Union[Parameter, Tensor], step: float = 1e-5,
                    indices: Optional[Iterable[Tuple[int, ...]]] = None) -> GradCheckReport:
    """Compare backward() against central differences, coordinate by coordinate.

    A coordinate whose one-sided slopes disagree sits on a relu/max/quantization
    kink when the analytic gradient matches one side or the disagreement
    survives a smaller step; it is reported in `excluded` instead of counting
    as a failure. Curvature alone never excludes a coordinate. A report that
    checked nothing does not pass.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    tensor = param.value if isinstance(param, Parameter) else param
    tensor.grad = None
    loss = graph()
    f0 = loss.item()
    backward(loss)
    analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    data = tensor.data
    report = GradCheckReport()
    for index in (indices if indices is not None else np.ndindex(*data.shape)):
        index = tuple(int(i) for i in index)
        original = data[index]
        data[index] = original + step
        f_plus = graph().item()
        data[index] = original - step
        f_minus = graph().item()
        data[index] = original
        central = (f_plus - f_minus) / (2.0 * step)
        a = analytic[index]
        slope_plus = (f_plus - f0) / step
        slope_minus = (f0 - f_minus) / step
        gap = abs(slope_plus - slope_minus)
        if gap > KINK_TOLERANCE * max(1.0, abs(central)) and (
                min(abs(a - slope_plus), abs(a - slope_minus)) <= KINK_SIDE_FRACTION * gap or
                _slope_gap(graph, data, index, f0, step * KINK_STEP_SHRINK) > KINK_PERSISTENCE * gap):
            report.excluded.append(index)
            continue
        rel = abs(a - central) / max(abs(a), abs(central), REL_ERROR_FLOOR)
        report.checked += 1
        if report.worst_index is None or rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_index = index
    tensor.grad = None
    return report


def grad_check(graph: Callable[[], Tensor], param: Union[Parameter, Tensor], step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients"""
    return check_gradients(graph, param, step).max_rel_error


def save_snapshot(path: str, tensors: Dict[str, np.ndarray], meta: Optional[Dict] = None) -> None:
    """Write a manifest (name, shape, byte offset) and the raw little-endian float64 payload"""
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
        chunks.append(payload)
        offset += len(payload)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Wrote snapshot {path} ({len(entries)} tensors, {offset} bytes)")


def load_snapshot(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a tensor snapshot")
    start = len(SNAPSHOT_MAGIC)
    (header_len,) = struct.unpack("<Q", blob[start:start + 8])
    header = json.loads(blob[start + 8:start + 8 + header_len].decode("utf-8"))
    payload = blob[start + 8 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise ValueError(f"{path}: tensor {entry['name']} truncated")
        tensors[entry["name"]] = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return tensors, header["meta"]
