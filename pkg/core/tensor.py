"""
Dense tensor engine with reverse-mode automatic differentiation

Tensors wrap numpy arrays (rank <= 4). Ops executed while a ``Tape`` is active
and with at least one input that requires gradients are recorded on that tape;
``backward(loss)`` replays the tape in reverse using the rules registered in
``BACKWARD_RULES``. The op set is closed: only what the TRG model needs.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.exceptions import (
    ContractError,
    ConvConfigError,
    DegenerateStatisticsError,
    DimensionError,
    NumericError,
)

logger = logging.getLogger(__name__)

MAX_RANK = 4
DEFAULT_DTYPE = np.float32

# (kernel size, padding) pairs the model uses; stride is always 1
SUPPORTED_CONV = {(1, 0), (3, 1)}

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

_local = threading.local()


class Tensor:
    """Immutable n-d array plus a lazily allocated gradient buffer"""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or '<unnamed>'} initialised with non-finite values")
        self._init(arr, requires_grad, name)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._init(arr, requires_grad, name)
        return tensor

    def _init(self, arr: np.ndarray, requires_grad: bool, name: Optional[str]):
        _check_shape(arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name
        self._tape: Optional["Tape"] = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assign(self, values) -> None:
        """Replace the values in place of an optimizer step or a finite-difference step"""
        arr = np.array(values, dtype=self.dtype, copy=True)
        if arr.shape != self.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values assigned to {self.name or 'tensor'}")
        arr.flags.writeable = False
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False, name=self.name)

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self):
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def _check_shape(shape: Tuple[int, ...]):
    if len(shape) > MAX_RANK:
        raise DimensionError(f"rank {len(shape)} exceeds the supported maximum of {MAX_RANK}")
    if any(extent <= 0 for extent in shape):
        raise DimensionError(f"all extents must be positive, got {shape}")


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    saved: Dict[str, object] = field(default_factory=dict)


class Tape:
    """Ordered record of executed ops; use as a context manager"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = BACKWARD_RULES[node.op](node, upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor._accumulate(grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients"""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced through recorded ops")
    loss._tape.backward(loss)


BackwardRule = Callable[[Node, np.ndarray], Sequence[Optional[np.ndarray]]]
BACKWARD_RULES: Dict[str, BackwardRule] = {}


def register_backward(op: str):
    def decorator(rule: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[op] = rule
        return rule
    return decorator


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, **saved) -> Tensor:
    """Wrap an op result, checking finiteness and recording it when tracking is on"""
    dtype = np.result_type(*[t.dtype for t in inputs])
    out = np.asarray(out).astype(dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    if not out.flags.c_contiguous:
        out = out.copy()
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        result.is_leaf = False
        result._tape = tape
        tape.record(Node(op, tuple(inputs), result, saved))
    return result


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.array(value, dtype=dtype, copy=True))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("add", (a, b), _broadcast_checked(np.add, a, b))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("sub", (a, b), _broadcast_checked(np.subtract, a, b))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_op("mul", (a, b), _broadcast_checked(np.multiply, a, b))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


def _broadcast_checked(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from e


@register_backward("add")
def _add_backward(node: Node, grad: np.ndarray):
    a, b = node.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


@register_backward("sub")
def _sub_backward(node: Node, grad: np.ndarray):
    a, b = node.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


@register_backward("mul")
def _mul_backward(node: Node, grad: np.ndarray):
    a, b = node.inputs
    return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


# --- linear algebra and layout ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return apply_op("matmul", (a, b), a.data @ b.data)


@register_backward("matmul")
def _matmul_backward(node: Node, grad: np.ndarray):
    a, b = node.inputs
    return grad @ b.data.T, a.data.T @ grad


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from e
    return apply_op("reshape", (x,), out)


@register_backward("reshape")
def _reshape_backward(node: Node, grad: np.ndarray):
    return (grad.reshape(node.inputs[0].shape),)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    return apply_op("transpose", (x,), x.data.transpose(axes), axes=axes)


@register_backward("transpose")
def _transpose_backward(node: Node, grad: np.ndarray):
    return (grad.transpose(np.argsort(node.saved["axes"])),)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    return apply_op("stack", tuple(tensors), np.stack([t.data for t in tensors], axis=axis), axis=axis)


@register_backward("stack")
def _stack_backward(node: Node, grad: np.ndarray):
    axis = node.saved["axis"]
    return tuple(np.take(grad, i, axis=axis) for i in range(len(node.inputs)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from e
    return apply_op("concat", tuple(tensors), out, axis=axis)


@register_backward("concat")
def _concat_backward(node: Node, grad: np.ndarray):
    axis = node.saved["axis"]
    bounds = np.cumsum([t.shape[axis] for t in node.inputs])[:-1]
    return tuple(np.split(grad, bounds, axis=axis))


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis``, dropping that axis"""
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise DimensionError(f"index {index} out of range for axis {axis} of shape {x.shape}")
    return apply_op("select", (x,), np.take(x.data, index, axis=axis), index=index, axis=axis)


@register_backward("select")
def _select_backward(node: Node, grad: np.ndarray):
    x = node.inputs[0]
    out = np.zeros(x.shape, dtype=grad.dtype)
    slicer = [slice(None)] * x.ndim
    slicer[node.saved["axis"]] = node.saved["index"]
    out[tuple(slicer)] = grad
    return (out,)


# --- reductions ---------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.sum(axis=axis, keepdims=keepdims) / count
    return apply_op("mean", (x,), out, axis=axis, keepdims=keepdims, count=count)


def _expand_reduced(node: Node, grad: np.ndarray) -> np.ndarray:
    x = node.inputs[0]
    axis = node.saved["axis"]
    if axis is not None and not node.saved["keepdims"]:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, x.shape)


@register_backward("sum")
def _sum_backward(node: Node, grad: np.ndarray):
    return (_expand_reduced(node, grad),)


@register_backward("mean")
def _mean_backward(node: Node, grad: np.ndarray):
    return (_expand_reduced(node, grad) / node.saved["count"],)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over C, H, W jointly: C x H x W -> scalar, or B x C x H x W -> B"""
    if x.ndim == 3:
        return mean(x)
    if x.ndim == 4:
        return mean(x, axis=(1, 2, 3))
    raise DimensionError(f"global_avg_pool expects rank 3 or 4, got shape {x.shape}")


# --- nonlinearities -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return apply_op("relu", (x,), np.maximum(x.data, 0))


@register_backward("relu")
def _relu_backward(node: Node, grad: np.ndarray):
    # subgradient 0 at 0
    return (grad * (node.inputs[0].data > 0),)


def tanh(x: Tensor) -> Tensor:
    return apply_op("tanh", (x,), np.tanh(x.data))


@register_backward("tanh")
def _tanh_backward(node: Node, grad: np.ndarray):
    out = node.output.data
    return (grad * (1 - out * out),)


def stable_sigmoid(values: np.ndarray) -> np.ndarray:
    decay = np.exp(-np.abs(values))
    return np.where(values >= 0, 1 / (1 + decay), decay / (1 + decay))


def sigmoid(x: Tensor) -> Tensor:
    return apply_op("sigmoid", (x,), stable_sigmoid(x.data))


@register_backward("sigmoid")
def _sigmoid_backward(node: Node, grad: np.ndarray):
    out = node.output.data
    return (grad * out * (1 - out),)


def softmax_rows(m: Tensor) -> Tensor:
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {m.shape}")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return apply_op("softmax_rows", (m,), expd / expd.sum(axis=1, keepdims=True))


@register_backward("softmax_rows")
def _softmax_rows_backward(node: Node, grad: np.ndarray):
    s = node.output.data
    return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


# --- convolution and pooling ----------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, padding: Optional[int] = None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation; x is C x H x W or B x C x H x W"""
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be C_out x C_in x kh x kw, got shape {kernel.shape}")
    kh, kw = kernel.shape[2:]
    if padding is None:
        padding = kh // 2
    if kh != kw or (kh, padding) not in SUPPORTED_CONV or stride != 1:
        raise ConvConfigError(
            f"unsupported conv configuration: kernel {kh}x{kw}, padding {padding}, stride {stride}"
        )
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be rank 3 or 4, got shape {x.shape}")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    if xb.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    out = _correlate(xb, kernel.data, padding)
    return apply_op("conv2d", (x, kernel), out if batched else out[0], padding=padding, batched=batched)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _correlate(x: np.ndarray, k: np.ndarray, padding: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    if kh == 1:
        out = np.tensordot(x, k[:, :, 0, 0], axes=([1], [1]))
    else:
        windows = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
        out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


@register_backward("conv2d")
def _conv2d_backward(node: Node, grad: np.ndarray):
    x, kernel = node.inputs
    padding = node.saved["padding"]
    batched = node.saved["batched"]
    gb = grad if batched else grad[None]
    xb = x.data if batched else x.data[None]
    k = kernel.data
    if k.shape[2] == 1:
        dx = np.tensordot(gb, k[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
        dk = np.tensordot(gb, xb, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    else:
        flipped = k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _correlate(gb, flipped, padding)
        windows = sliding_window_view(_pad(xb, padding), k.shape[2:], axis=(2, 3))
        dk = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
    return (dx if batched else dx[0]), dk


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping spatial average pooling over the last two axes"""
    h, w = x.shape[-2:]
    if x.ndim < 3 or h % size or w % size:
        raise DimensionError(f"avg_pool2d({size}) needs spatial extents divisible by {size}, got {x.shape}")
    blocks = x.data.reshape(x.shape[:-2] + (h // size, size, w // size, size))
    return apply_op("avg_pool2d", (x,), blocks.mean(axis=(-3, -1)), size=size)


@register_backward("avg_pool2d")
def _avg_pool2d_backward(node: Node, grad: np.ndarray):
    size = node.saved["size"]
    expanded = np.repeat(np.repeat(grad, size, axis=-2), size, axis=-1)
    return (expanded / (size * size),)


# --- batch normalization -------------------------------------------------

class BatchNormState:
    """Running statistics of one batch-norm site"""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def update(self, batch_mean: np.ndarray, unbiased_var: np.ndarray):
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased_var).astype(self.running_var.dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of a B x C x H x W tensor over batch and space"""
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects B x C x H x W, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"affine parameters {gamma.shape}/{beta.shape} do not match {channels} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if count < 2:
            raise DegenerateStatisticsError(
                f"batch_norm in training mode needs B*H*W >= 2, got shape {x.shape}"
            )
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        state.update(batch_mean, batch_var * count / (count - 1))
    else:
        batch_mean, batch_var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(batch_var + state.eps)
    x_hat = (x.data - batch_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]
    return apply_op(
        "batch_norm", (x, gamma, beta), out,
        x_hat=x_hat, inv_std=inv_std, training=training, count=count,
    )


@register_backward("batch_norm")
def _batch_norm_backward(node: Node, grad: np.ndarray):
    _, gamma, _ = node.inputs
    x_hat = node.saved["x_hat"]
    inv_std = node.saved["inv_std"][None, :, None, None]
    axes = (0, 2, 3)
    d_gamma = (grad * x_hat).sum(axis=axes)
    d_beta = grad.sum(axis=axes)
    d_xhat = grad * gamma.data[None, :, None, None]
    if node.saved["training"]:
        m = node.saved["count"]
        d_x = inv_std / m * (
            m * d_xhat
            - d_xhat.sum(axis=axes, keepdims=True)
            - x_hat * (d_xhat * x_hat).sum(axis=axes, keepdims=True)
        )
    else:
        d_x = d_xhat * inv_std
    return d_x, d_gamma, d_beta
