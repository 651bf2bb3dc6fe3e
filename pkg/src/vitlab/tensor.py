"""Dense float32 tensors with tape-based reverse-mode autodiff.

Values are stored as float32; reductions (matmul accumulation, means,
variances, log-sum-exp) run in float64 internally so that finite-difference
gradient checks stay tight at toy scale. Operations record onto the
currently active :class:`Tape`; ``backward`` replays the tape in exact
reverse order. Tensors are immutable once created except for gradient
accumulation.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NumericError",
    "GradientError",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "index_select",
    "slice_tokens",
    "expand",
    "reduce_sum",
    "reduce_mean",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "AdamW",
    "set_debug_checks",
    "write_blob",
    "read_blob",
    "blob_to_bytes",
    "blob_from_bytes",
    "check_gradients",
    "numeric_gradient",
]


class TensorError(Exception):
    """Base class for tensor-engine errors."""


class ShapeError(TensorError):
    """Operand shapes violate an operation's contract."""


class NumericError(TensorError):
    """An operation produced NaN or Inf from finite inputs."""


class GradientError(TensorError):
    """Gradient bookkeeping contract violated (missing grad, non-scalar loss)."""


_DEBUG_CHECKS = True


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection at op boundaries. Returns the previous setting."""
    global _DEBUG_CHECKS
    previous = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)
    return previous


ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """N-dimensional float32 array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad = self.grad + g.astype(np.float32, copy=False)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants auto-wrap as non-grad tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


class _Node:
    """One tape entry: op id, inputs, output, and the saved-state backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Define-by-run operation record; single-threaded by contract.

    Use as a context manager around the differentiable region. The tape is
    freed (node list cleared) after ``backward`` runs.
    """

    _local = threading.local()

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = self._stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    @classmethod
    def _stack(cls) -> list:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, node: _Node) -> None:
        self._nodes.append(node)
        node.output._tape = self

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise GradientError("loss was not recorded on this tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self._nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not isinstance(tensor, Tensor):
                    continue
                if tensor.requires_grad:
                    if _DEBUG_CHECKS and not np.all(np.isfinite(grad)):
                        raise NumericError(f"non-finite gradient out of op '{node.op}'")
                    tensor.accumulate_grad(grad)
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss over its recording tape."""
    if loss._tape is None:
        raise GradientError("loss is not attached to a tape")
    loss._tape.backward(loss)


def _make(op: str, data: np.ndarray, inputs: tuple,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create the output tensor of an op and record it when a tape is active."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float32)
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = Tape.active()
    needs_grad = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if tape is not None and needs_grad:
        out.requires_grad = True
        tape.record(_Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make("neg", -a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 accumulation; supports leading batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = np.matmul(a64, b64)

    def bwd(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, b64.swapaxes(-1, -2))
        gb = np.matmul(a64.swapaxes(-1, -2), g64)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old_shape),)

    return _make("reshape", out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inverse),)

    return _make("transpose", out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, bwd)


def index_select(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis with an integer index array (e.g. token permutation)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)
    in_shape = a.shape

    def bwd(g):
        ga = np.zeros(in_shape, dtype=np.float32)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make("index_select", out, (a,), bwd)


def slice_tokens(a: Tensor, key) -> Tensor:
    """Basic slicing (view semantics forward, scatter-add backward)."""
    out = a.data[key]
    in_shape = a.shape

    def bwd(g):
        ga = np.zeros(in_shape, dtype=np.float32)
        ga[key] += g
        return (ga,)

    return _make("slice", out, (a,), bwd)


def expand(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast to a larger shape; backward sums over broadcast axes."""
    out = np.broadcast_to(a.data, shape).copy()
    in_shape = a.shape

    def bwd(g):
        return (_unbroadcast(g, in_shape),)

    return _make("expand", out, (a,), bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    in_shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).astype(np.float32),)

    return _make("sum", out, (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    in_shape = a.shape
    count = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, in_shape).astype(np.float32),)

    return _make("mean", out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and fused layers
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        local = cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((g * local).astype(np.float32),)

    return _make("gelu", out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction, float64 accumulation)."""
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    y32 = y.astype(np.float32)

    def bwd(g):
        gy = g * y32
        return (gy - y32 * gy.sum(axis=axis, keepdims=True),)

    return _make("softmax", y32, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out).astype(np.float32)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} must match last axis of {a.shape}")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def bwd(g):
        g64 = g.astype(np.float64)
        dgain = (g64 * xhat).sum(axis=tuple(range(g.ndim - 1)))
        dbias = g64.sum(axis=tuple(range(g.ndim - 1)))
        dxhat = g64 * gain.data.astype(np.float64)
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return (dx.astype(np.float32),
                dgain.astype(np.float32),
                dbias.astype(np.float32))

    return _make("layer_norm", out, (a, gain, bias), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    ``logits`` is (n, c); ``labels`` are integer class indices in [0, c).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, c) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise IndexError(f"labels out of range [0, {c})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    nll = lse[:, 0] - z[np.arange(n), labels]
    loss = np.array(nll.mean())
    p = np.exp(z - lse)

    def bwd(g):
        gp = p.copy()
        gp[np.arange(n), labels] -= 1.0
        scale = float(np.asarray(g).reshape(-1)[0])
        return ((scale * gp / n).astype(np.float32),)

    return _make("cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Holds per-parameter first/second moment buffers and a shared step
    counter; ``step`` applies the bias-corrected update and leaves grads
    untouched.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise GradientError("optimizer_step with missing gradient")
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - np.float32(self.lr) * update.astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# blob serialization: rank u32 LE, extents u32 LE each, float32 payload
# ---------------------------------------------------------------------------

def blob_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def blob_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns (array, bytes consumed)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    extents = struct.unpack_from(f"<{rank}I", buf, offset + 4)
    head = 4 + 4 * rank
    count = int(np.prod(extents)) if rank else 1
    payload = np.frombuffer(buf, dtype="<f4", count=count, offset=offset + head)
    arr = payload.reshape(extents).astype(np.float32)
    return arr, head + 4 * count


def write_blob(f, arr: np.ndarray) -> int:
    data = blob_to_bytes(arr)
    f.write(data)
    return len(data)


def read_blob(f) -> np.ndarray:
    head = f.read(4)
    (rank,) = struct.unpack("<I", head)
    extents = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(extents)) if rank else 1
    payload = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
    return payload.reshape(extents).astype(np.float32)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-finite-difference gradient of scalar ``fn()`` w.r.t. ``t``.

    Perturbs the float32 storage elementwise and divides by the actually
    representable delta. Independent of the tape.
    """
    grad = np.zeros(t.data.size, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(flat[i])
        up = fn().item()
        flat[i] = orig - h
        lo = float(flat[i])
        down = fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (hi - lo)
    return grad.reshape(t.shape)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = 1e-3, rtol: float = 1e-2, atol: float = 1e-4) -> float:
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` must rebuild the loss from ``tensors`` on every call. Every
    element of every tensor is perturbed by ±h. Raises ``GradientError``
    on disagreement; returns the worst relative error observed.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(flat[i])  # actually representable perturbation
            up = fn().item()
            flat[i] = orig - h
            lo = float(flat[i])
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (hi - lo)
            a = g.reshape(-1)[i]
            err = abs(a - numeric)
            denom = max(abs(numeric), abs(a))
            if err > atol and err > rtol * denom:
                raise GradientError(
                    f"gradient mismatch at element {i} of {t.shape}: "
                    f"analytic={a:.6g} numeric={numeric:.6g}")
            if denom > atol:
                worst = max(worst, err / denom)
    return worst
