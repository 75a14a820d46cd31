"""
dense float64 tensors with tape-based reverse-mode differentiation

every op is a module level function that computes its result with numpy,
checks it is finite and, when a GradTape is active on the current thread and
one of the inputs requires a gradient, appends a record holding the inputs and
a closure that maps the output gradient to the input gradients.

tapes and MAC counters are thread local, so independent graphs can be built
concurrently as long as the parameter tensors are only read.
"""
import math
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

SIGMOID_CLAMP = 30.0
BCE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_local = threading.local()

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class _Node(NamedTuple):
    tape: "GradTape"
    index: int


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad_node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.name = ""
        t.grad_node = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":  # noqa: N802
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{grad}{label})"


class _Record(NamedTuple):
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class GradTape:
    """
    ordered record of the ops executed while the tape is active

    use as a context manager, tapes can be nested, the innermost one records
    """

    def __init__(self) -> None:
        self.records: List[_Record] = []

    def __enter__(self) -> "GradTape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output.grad_node = _Node(self, len(self.records))
        self.records.append(_Record(op, inputs, output, backward_fn))


class MacCounter:
    """counts multiply-accumulates of matmul calls, keyed by the active mac_scope label"""

    def __init__(self) -> None:
        self.macs: Dict[str, int] = {}

    def __enter__(self) -> "MacCounter":
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("counters").pop()

    def add(self, label: str, n: int) -> None:
        self.macs[label] = self.macs.get(label, 0) + n

    @property
    def total(self) -> int:
        return sum(self.macs.values())


@contextmanager
def mac_scope(label: str) -> Iterator[None]:
    scopes = _stack("scopes")
    scopes.append(label)
    try:
        yield
    finally:
        scopes.pop()


class GradMap:
    """gradients keyed by tensor identity, tensors never reached map to zeros"""

    def __init__(self, grads: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


def _active(name: str):
    stack = _stack(name)
    return stack[-1] if stack else None


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(data)
    tape = _active("tapes")
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _require_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op} received a non-finite input")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {list(a.shape)} does not match {list(b.shape)}")


def _matrix(op: str, a: Tensor) -> None:
    if a.data.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {list(a.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _matrix("matmul", a)
    _matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    counter = _active("counters")
    if counter is not None:
        counter.add(_active("scopes") or "unscoped", a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """elementwise sum, b may also be a row bias of shape [n] added to every row of a [m, n]"""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))

    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))

    raise DimensionError(f"add: shape {list(a.shape)} does not match {list(b.shape)}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    _matrix("transpose", a)
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        _matrix("concat_rows", p)
        if p.shape[1] != parts[0].shape[1]:
            raise DimensionError(f"concat_rows: shape {list(parts[0].shape)} does not match {list(p.shape)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        _matrix("concat_cols", p)
        if p.shape[0] != parts[0].shape[0]:
            raise DimensionError(f"concat_cols: shape {list(parts[0].shape)} does not match {list(p.shape)}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _matrix("slice_rows", a)
    if not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {list(a.shape)}")

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _emit("slice_rows", a.data[start:stop].copy(), (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _matrix("slice_cols", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {list(a.shape)}")

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", a.data[:, start:stop].copy(), (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """normalizes each row of x to zero mean and unit variance, then applies gamma and beta"""
    _matrix("layer_norm", x)
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        shapes = f"gain {list(gamma.shape)} / bias {list(beta.shape)}"
        raise DimensionError(f"layer_norm: {shapes} do not fit {list(x.shape)}")

    mu = x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std

    def backward(g: np.ndarray):
        dxhat = g * gamma.data
        dx = (
            inv_std
            / n
            * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """exact GELU, x * Phi(x)"""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _emit("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # input clamped to +-SIGMOID_CLAMP so the output never saturates to exactly 0 or 1
    _require_finite("sigmoid", x)
    xc = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    ez = np.exp(-np.abs(xc))
    s = np.where(xc >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    inside = np.abs(x.data) <= SIGMOID_CLAMP
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s) * inside,))


def softmax_rows(x: Tensor) -> Tensor:
    _matrix("softmax_rows", x)
    _require_finite("softmax_rows", x)
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", s, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit("mean", np.array(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def binary_cross_entropy(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """mean bitwise cross-entropy of probabilities pred against targets in [0, 1]"""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"binary_cross_entropy: shape {list(pred.shape)} does not match {list(t.shape)}")

    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))

    def backward(g: np.ndarray):
        return (g * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,)

    return _emit("binary_cross_entropy", np.array(loss), (pred,), backward)


def backward(loss: Tensor) -> GradMap:
    """
    replay the tape that recorded loss in reverse and return the gradient of loss
    with respect to every tensor that requires a gradient
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {list(loss.shape)}")
    if loss.grad_node is None:
        raise ContractError("loss is not connected to a recorded tape")

    tape, last = loss.grad_node
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    tensors: Dict[int, Tensor] = {id(loss): loss}

    for record in reversed(tape.records[: last + 1]):
        g = grads.get(id(record.output))
        if g is None:
            continue
        for tensor, gi in zip(record.inputs, record.backward(g)):
            if gi is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = tensor

    return GradMap(grads, tensors)


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """central finite differences of the scalar fn() with respect to every entry of tensor"""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        plus = fn()
        flat[i] = saved - step
        minus = fn()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale_)
