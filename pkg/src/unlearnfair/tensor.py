"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a node on the graph when any of its inputs requires a
gradient and gradient recording is enabled. ``backward`` collects the nodes
reachable from a scalar loss into a :class:`Tape` (topological order),
replays it in reverse once, then clears the recorded graph.

Broadcasting is limited to scalars. Row-wise bias and per-feature affine
terms go through the explicit ``add_bias`` / ``scale_shift`` ops so each
backward rule stays small enough to audit.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed forward computations without recording a graph."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _all_finite(arr: np.ndarray) -> bool:
    if arr.size <= 4096:
        return bool(np.isfinite(arr).all())
    # the sum is finite whenever every element is; only fall back to the
    # elementwise test when the fast path is inconclusive (overflow, nan, inf)
    with np.errstate(over="ignore", invalid="ignore"):
        if math.isfinite(arr.sum()):
            return True
    return bool(np.isfinite(arr).all())


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not _all_finite(out):
        raise NumericError(f"{op} produced non-finite values")
    record = is_grad_enabled() and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, record)
    if record:
        t._node = Node(op, tuple(inputs), backward_fn)
    return t


# ---------------------------------------------------------------------------
# tape / backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def clear(self) -> None:
        for t in self.nodes:
            t._node = None
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Leaf gradients accumulate into any existing ``.grad``; call ``zero_grad``
    between steps. The graph is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (nothing requires grad)")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        t.grad = g
        in_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_operand(a: Tensor, b, op: str):
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
        return b
    if np.ndim(b) != 0:
        raise ShapeError(f"{op}: only scalar broadcasting is supported")
    return float(b)


def add(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b, "add")
    if isinstance(b, Tensor):
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    return _emit("add", a.data + b, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b, "sub")
    if isinstance(b, Tensor):
        return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    return _emit("sub", a.data - b, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b, "mul")
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    return scale(a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0. The gradient is identically zero."""
    return _emit("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise DomainError(f"clamp bounds out of order: {lo} > {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name to one of the elementwise primitives."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "relu":
        return relu(a)
    if op == "sign":
        return sign(a)
    if op == "clamp":
        lo, hi = b
        return clamp(a, lo, hi)
    raise DomainError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(old)} to {list(shape)}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum keeps each output row independent of the other rows, so results
    # are bit-identical however a batch is split. BLAS does not guarantee that.
    return np.einsum("ik,kj->ij", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {list(a.shape)} x {list(b.shape)}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", _rowwise_matmul(ad, bd), (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[n, d] + b[d]`` row by row."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: {list(x.shape)} vs bias {list(b.shape)}")
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-feature affine map ``x * gamma + beta`` for ``x[n, d]``."""
    d = x.shape[-1]
    if x.ndim != 2 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("scale_shift: gamma/beta must match the feature dimension")
    xd, gd = x.data, gamma.data

    def bw(g):
        return g * gd, (g * xd).sum(axis=0), g.sum(axis=0)

    return _emit("scale_shift", xd * gd + beta.data, (x, gamma, beta), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) of ``x[n,c,h,w]`` with ``kernel[o,c,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    # im2col: one row per output position, laid out (c, kh, kw) like the kernel
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False
    )
    cols = win.reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = _rowwise_matmul(cols, np.ascontiguousarray(wmat.T))
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        dk = (gm.T @ cols).reshape(kernel.shape)
        dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return np.ascontiguousarray(dx), dk

    return _emit("conv2d", out, (x, kernel), bw)


# ---------------------------------------------------------------------------
# normalization primitives (pre-affine)
# ---------------------------------------------------------------------------


def batch_normalize(x: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize each column of ``x[n, d]`` by its batch mean and biased variance.

    Returns the normalized tensor plus the batch mean and variance used.
    """
    if x.ndim != 2:
        raise ShapeError("batch_normalize expects x[n, d]")
    n = x.shape[0]
    if n < 2:
        raise ContractError("batch norm in train mode needs at least 2 samples per feature")
    mu = x.data.sum(axis=0) / n
    centered = x.data - mu
    var = (centered * centered).sum(axis=0) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        return (inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0)),)

    return _emit("batch_normalize", xhat, (x,), bw), mu, var


def normalize_with_stats(x: Tensor, mean_: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    """``(x - mean) * (1 / sqrt(var + eps))`` with fixed statistics (inference batch norm)."""
    inv = 1.0 / np.sqrt(var + eps)
    return _emit("normalize_with_stats", (x.data - mean_) * inv, (x,), lambda g: (g * inv,))


def layer_normalize(x: Tensor, eps: float) -> Tensor:
    """Normalize each row of ``x[n, d]`` by its own mean and biased variance."""
    if x.ndim != 2:
        raise ShapeError("layer_normalize expects x[n, d]")
    d = x.shape[1]
    if d < 2:
        raise ContractError("layer norm needs at least 2 features per sample")
    mu = x.data.sum(axis=1, keepdims=True) / d
    centered = x.data - mu
    var = (centered * centered).sum(axis=1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        return (
            inv
            / d
            * (d * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)),
        )

    return _emit("layer_normalize", xhat, (x,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects logits[n, C]")
    n, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"got {labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= C):
        raise DomainError(f"labels must lie in [0, {C})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), bw)


def kl_divergence(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """Batch-mean ``KL(p_student || p_teacher)`` at a softmax temperature, times T**2.

    The teacher side is treated as a constant.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_logits.shape != student_logits.shape or student_logits.ndim != 2:
        raise ShapeError("student and teacher logits must share shape [n, C]")
    n = student_logits.shape[0]
    T = float(temperature)
    log_ps = _log_softmax(student_logits.data / T)
    log_pt = _log_softmax(t_logits / T)
    ps = np.exp(log_ps)
    a = log_ps - log_pt
    row_kl = (ps * a).sum(axis=1, keepdims=True)
    value = row_kl.mean() * T * T

    def bw(g):
        return (ps * (a - row_kl) * (float(g) * T / n),)

    return _emit("kl_divergence", np.array(value), (student_logits,), bw)
