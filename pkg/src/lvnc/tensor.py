"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations a U-Net and its losses need are provided.
Operations executed inside a ``with Tape() as tape:`` block are recorded;
outside of a tape they run as plain numpy code, which is what inference uses.

    >>> x = Tensor(np.arange(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> backward(tape, loss)
    >>> x.grad
    array([0., 2., 4.])
"""

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "record",
    "backward",
    "conv2d",
    "relu",
    "maxpool2",
    "upsample2",
    "concat_channels",
    "softmax_channels",
    "add",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "finite_diff_grad",
]


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("kind", "output", "inputs", "backward_fn")

    def __init__(self, kind, output, inputs, backward_fn):
        self.kind = kind
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Nodes are appended as operations run, so the list is already in
    topological order. A tape is meant to be used for one forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active tape.

    ``backward_fn`` maps the output gradient to one gradient per input (or
    None for inputs that need no gradient). Nothing is recorded when no tape
    is active or when no input requires a gradient.
    """
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(kind, out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss`` on ``tape``.

    Gradients are written fresh (not accumulated across calls). Tensors in
    ``params`` that the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, t in leaves.items():
        if key in grads:
            t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# network operations


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of an NCHW batch with a (Cout, Cin, kh, kw) kernel."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"input has {cin} channels but kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("kernel extents must be odd")
    if padding < 0:
        raise DimensionError("padding must be non-negative")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {cout} output channels")
    p = padding
    if h + 2 * p < kh or w + 2 * p < kw:
        raise DimensionError("kernel larger than padded input")
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1

    if kh == 1 and kw == 1 and p == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    else:
        if p:
            xp = np.zeros((n, cin, h + 2 * p, w + 2 * p))
            xp[:, :, p:p + h, p:p + w] = x.data
        else:
            xp = x.data
        s0, s1, s2, s3 = xp.strides
        win = as_strided(xp, (n, ho, wo, cin, kh, kw), (s0, s2, s3, s1, s2, s3), writeable=False)
        cols = win.reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def _backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ kmat
            if kh == 1 and kw == 1 and p == 0:
                gx = dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros((n, ho + kh - 1, wo + kw - 1, cin))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, :, i, j]
                gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return record("conv2d", out, (x, kernel, bias), _backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return record("relu", out, (x,), lambda g: (g * mask,))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties resolve to the first element in row-major order."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError("maxpool2 expects an NCHW tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return record("maxpool2", out, (x,), _backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two spatial axes."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample2", out, (x,), _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise DimensionError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] < 2:
        raise DimensionError("softmax_channels expects NCHW with at least two channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record("softmax", s, (x,), _backward)


# --------------------------------------------------------------------------
# small arithmetic used to assemble losses


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, size = a.shape, a.data.size
    return record("mean", np.array(a.data.mean()), (a,),
                  lambda g: (np.broadcast_to(g / size, shape),))


# --------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ContractError("step must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(_scalar(f(x)))
        flat[i] = orig - h
        fm = float(_scalar(f(x)))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def _scalar(v):
    return v.data if isinstance(v, Tensor) else v
