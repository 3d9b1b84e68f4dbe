"""
Reverse-mode automatic differentiation on top of numpy.

Every op records its parents and a closure mapping the output gradient to one
gradient per parent. `Tensor.backward` walks the graph once in reverse
topological order and accumulates into leaf tensors.
"""
import contextlib
import logging
import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

from utils.errors import NonDeterministicError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# Large finite negative used for masked logits; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9

_DEFAULT_DTYPE = np.float64
_grad_mode = threading.local()


def set_default_dtype(dtype: Union[str, np.dtype]) -> None:
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise NumericError(f"unsupported dtype {resolved}; use float64 or float32")
    _DEFAULT_DTYPE = resolved.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; every sampling op takes one explicitly."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(values: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NumericError(f"{op_name}: input contains {bad} non-finite value(s) (NaN/Inf)")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
        op: str,
    ) -> "Tensor":
        """Build an op output. `backward(g)` returns one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
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
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # Backward
    # ------------------------------------------------------------------
    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1:
            raise NumericError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            logger.warning("backward() called on a tensor that does not require grad")
            return
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor.from_op(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor.from_op(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out**2),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return Tensor.from_op(a.data * positive, (a,), lambda g: (g * positive,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation; smooth everywhere, which keeps finite-difference checks clean."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return Tensor.from_op(out, (a,), backward, "gelu")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > low) & (a.data < high)
    return Tensor.from_op(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def where(condition: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)

    def backward(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return Tensor.from_op(np.where(cond, a.data, b.data), (a, b), backward, "where")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by a constant."""
    return where(mask, Tensor(np.asarray(value, dtype=as_tensor(a).data.dtype)), a)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise NumericError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep)


# ----------------------------------------------------------------------
# Linear algebra and shape
# ----------------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise NumericError("matmul needs at least 1-D operands")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise NumericError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        A, B, g2 = a.data, b.data, g
        if A.ndim == 1:
            A = A[None, :]
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            B = B[:, None]
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g2
        if a.ndim == 1:
            ga = np.squeeze(ga, -2)
        if b.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(a.data[index], (a,), backward, "getitem")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `weight[ids]` with scatter-add backward."""
    return getitem(weight, np.asarray(ids, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# ----------------------------------------------------------------------
# Normalizations
# ----------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    kept = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = kept if keepdims else np.squeeze(kept, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - kept),)

    return Tensor.from_op(out, (x,), backward, "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise NumericError(f"layer_norm eps must be > 0, got {eps}")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise NumericError(
            f"layer_norm gain/bias must have length {x.shape[-1]}, got {gain.shape} and {bias.shape}"
        )
    n = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        g_normed = g * gain.data
        gx = (inv_std / n) * (
            n * g_normed
            - g_normed.sum(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * normed, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor.from_op(normed * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the leading axes."""
    logp = log_softmax(logits, axis=-1)
    targets = np.asarray(targets, dtype=np.int64)
    flat_index = np.indices(targets.shape)
    picked = logp[tuple(flat_index) + (targets,)]
    return -picked.mean()


# ----------------------------------------------------------------------
# Attention
# ----------------------------------------------------------------------
def scaled_dot_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """
    softmax(q kᵀ / √d) v over the last two axes.

    `mask` is boolean and broadcastable to the score matrix; True marks positions
    that may be attended. Returns (output, weights).
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.shape[-1] != key.shape[-1]:
        raise NumericError(f"attention: query dim {query.shape[-1]} != key dim {key.shape[-1]}")
    if key.shape[-2] != value.shape[-2]:
        raise NumericError(f"attention: {key.shape[-2]} keys but {value.shape[-2]} values")
    scores = matmul(query, key.swapaxes(-1, -2)) * (1.0 / np.sqrt(query.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, scores.shape)
        except ValueError as e:
            raise NumericError(f"attention: mask shape {mask.shape} does not match scores {scores.shape}") from e
        if not np.all(full.any(axis=-1)):
            raise NumericError("attention: a query row has every key masked; distribution undefined")
        scores = masked_fill(scores, ~full, MASK_VALUE)
    weights = softmax(scores, axis=-1)
    return matmul(weights, value), weights


# ----------------------------------------------------------------------
# Gradient verification
# ----------------------------------------------------------------------
class GradCheckReport(BaseModel):
    op_name: str
    max_rel_error: float
    passed: bool
    probe_count: int
    tolerance: float

    @model_validator(mode="after")
    def _passed_matches_error(self) -> "GradCheckReport":
        if self.passed != (self.max_rel_error < self.tolerance):
            raise ValueError("passed must equal max_rel_error < tolerance")
        return self


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    probes_per_param: Optional[int] = 8,
    rng: Optional[np.random.Generator] = None,
    atol: float = 0.0,
    op_name: str = "f",
) -> GradCheckReport:
    """
    Compare backward() against central differences.

    `f` must rebuild its graph (and re-seed any rng it uses) on every call.
    Coordinates whose absolute disagreement is at most `atol` count as exact.
    """
    if h <= 0:
        raise NumericError(f"finite difference step must be > 0, got {h}")
    params = list(params)
    rng = rng or make_rng(0)

    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = f()
    if loss.size != 1:
        raise NumericError(f"{op_name}: finite_difference_check needs a scalar function")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    with no_grad():
        repeat = f().item()
    if repeat != loss.item():
        raise NonDeterministicError(f"{op_name}: two evaluations differ ({loss.item()!r} vs {repeat!r})")

    worst = 0.0
    probes = 0
    with no_grad():
        for p, grad in zip(params, analytic):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            if probes_per_param is None or flat.size <= probes_per_param:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=probes_per_param, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                a = float(grad.reshape(-1)[i])
                diff = abs(a - numeric)
                err = 0.0 if diff <= atol else diff / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
                probes += 1

    report = GradCheckReport(
        op_name=op_name,
        max_rel_error=worst,
        passed=worst < tolerance,
        probe_count=probes,
        tolerance=tolerance,
    )
    logger.debug(f"gradient check {report}")
    return report
