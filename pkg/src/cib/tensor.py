"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: each operation on tensors records its inputs
and a vector-Jacobian closure on the output, so the graph for one loss
evaluation is rebuilt on every forward pass and discarded afterwards.
Values are numpy float64 arrays throughout; there is no device, dtype or
fusion machinery.

Conventions:

* Tensor values are treated as immutable once created.  The only sanctioned
  mutation is ``Tensor.assign_``, meant for parameter updates between graph
  lifetimes (optimizer steps, checkpoint loading).
* ``backward`` never accumulates into the tensors themselves.  It returns a
  fresh :class:`GradientMap`; calling it twice on the same graph gives the
  same answer.
* Elementwise binary ops broadcast with standard trailing-dimension
  alignment.  ``matmul`` and ``transpose`` are strictly 2-D.
* A graph must stay on the thread that built it; independent graphs can be
  evaluated concurrently.
"""

from __future__ import annotations

import base64
import contextvars
import itertools
import json
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class DomainError(ValueError):
    """Raised when an input leaves an op's documented domain (log of a
    non-positive value, overflow to non-finite values, ...)."""


class GraphError(ValueError):
    """Raised on invalid differentiation requests (non-scalar loss,
    non-deterministic function under finite differencing, ...)."""


_node_ids = itertools.count(1)

# When False, ops do not record parents/vjps; used for evaluation passes.
# Context-local so concurrent graphs on other threads are unaffected.
_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        self._token = _GRAD_ENABLED.set(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.reset(self._token)
        return False


class Tensor:
    """A dense float64 array plus its position in the current graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, vjps) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
        out.node_id = next(_node_ids)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out._parents = ()
            out._vjps = ()
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assign_(self, new_data) -> None:
        """Overwrite the value in place.  Only valid between graph lifetimes."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_ shape mismatch: {arr.shape} vs {self.data.shape}")
        self.data = arr.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the registered ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, data: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op}: produced non-finite values (input outside documented domain)")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _check_finite("add", a.data + b.data)
    return Tensor._from_op(out, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    out = _check_finite("sub", a.data - b.data)
    return Tensor._from_op(out, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(-g, b.shape),
    ))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _check_finite("elementwise_mul", a.data * b.data)
    return Tensor._from_op(out, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.shape),
        lambda g: _unbroadcast(g * a.data, b.shape),
    ))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = _check_finite("scalar_mul", a.data * c)
    return Tensor._from_op(out, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = _check_finite("matmul", a.data @ b.data)
    return Tensor._from_op(out, (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), (lambda g: g * (a.data > 0.0),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = _check_finite("exp", np.exp(a.data))
    return Tensor._from_op(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: non-positive input (min={a.data.min()!r})")
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g / a.data,))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.mean(a.data, axis=axis)
    if axis is None:
        n = a.size
        vjp = lambda g: np.full(a.shape, g / n)  # noqa: E731
    else:
        n = a.shape[axis]
        vjp = lambda g: np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy()  # noqa: E731
    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - numpy-style name
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis)
    if axis is None:
        vjp = lambda g: np.full(a.shape, g)  # noqa: E731
    else:
        vjp = lambda g: np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()  # noqa: E731
    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        m = np.max(a.data)
        out = np.asarray(m + np.log(np.sum(np.exp(a.data - m))))

        def vjp(g):
            return g * np.exp(a.data - out)
    else:
        m = np.max(a.data, axis=axis, keepdims=True)
        out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a.data - m), axis=axis))

        def vjp(g):
            soft = np.exp(a.data - np.expand_dims(out, axis))
            return np.expand_dims(g, axis) * soft

    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not align: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(index)]
        return vjp

    return Tensor._from_op(out, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"slice: axis {axis} out of range for shape {a.shape}")
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] invalid for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    out = a.data[tuple(index)].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[tuple(index)] = g
        return full

    return Tensor._from_op(out, (a,), (vjp,))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got shape {a.shape}")
    out = a.data.T.copy()
    return Tensor._from_op(out, (a,), (lambda g: g.T,))


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return Tensor._from_op(out, (a,), (lambda g: _unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return Tensor._from_op(out, (a,), (lambda g: g.reshape(a.shape),))


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "mean": mean,
    "sum": sum,
    "logsumexp": logsumexp,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "broadcast": broadcast,
    "reshape": reshape,
}


def apply(op_kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Generic dispatcher over the registered ops.

    Variadic ops (``concat``) take the whole input list; everything else is
    called positionally.  Op-specific parameters (axis, slice bounds, target
    shape, scalar factor) are passed as keyword arguments.
    """
    if op_kind not in _OPS:
        raise ValueError(f"unknown op kind {op_kind!r}; known: {sorted(_OPS)}")
    fn = _OPS[op_kind]
    if op_kind == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OPS)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class GradientMap:
    """Gradients of one scalar loss, keyed by tensor ``node_id``.

    Tensors that were never reached from the loss get a zero gradient (the
    documented choice for unreachable parameters)."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._grads

    def get(self, t: Tensor) -> Tensor:
        g = self._grads.get(t.node_id)
        if g is None:
            return Tensor(np.zeros(t.shape))
        return Tensor(g)

    def raw(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.node_id)
        return np.zeros(t.shape) if g is None else g

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar loss.

    Gradients satisfy the chain rule over the recorded graph.  Each call is
    independent: nothing is stored on the tensors, so repeated calls on the
    same graph return identical maps.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward: loss must be a Tensor")
    if loss.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return GradientMap({})

    # Iterative topological order (post-order DFS).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = contrib if acc is None else acc + contrib
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    Returns the maximum over all parameter entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    ``f`` must be deterministic: two identical forward passes that disagree
    bitwise are rejected, since finite differences of a noisy function are
    meaningless.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    params = list(params)

    first = f(params)
    second = f(params)
    if not np.array_equal(first.data, second.data):
        raise GraphError("finite_diff_check: f is not deterministic across identical calls")
    if first.ndim != 0:
        raise GraphError(f"finite_diff_check: f must return a scalar, got shape {first.shape}")

    grads = backward(first)
    worst = 0.0
    for p in params:
        analytic = grads.raw(p)
        base = p.data.copy()
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            p.assign_(base)
            hi = f(params).item()
            flat[i] = orig - h
            p.assign_(base)
            lo = f(params).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * h)
        p.assign_(base)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        err = np.abs(analytic - numeric) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

def checkpoint_dumps(params: Mapping[str, Tensor]) -> str:
    """Serialize named parameters to the JSON checkpoint format.

    Each entry maps the parameter name to its shape and a base64 payload of
    the row-major little-endian float64 bytes; round-trips are bit-exact.
    """
    doc = {}
    for name in sorted(params):
        t = params[name]
        payload = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        doc[name] = {
            "shape": list(t.shape),
            "data": base64.b64encode(payload).decode("ascii"),
        }
    return json.dumps(doc, sort_keys=True)


def checkpoint_loads(text: str) -> dict[str, np.ndarray]:
    doc = json.loads(text)
    out = {}
    for name, entry in doc.items():
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"])
        flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if flat.size != math.prod(shape):
            raise ValueError(f"checkpoint entry {name!r}: payload does not match shape {shape}")
        out[name] = flat.reshape(shape)
    return out


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(checkpoint_dumps(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        return checkpoint_loads(fh.read())


def load_into(params: Mapping[str, Tensor], state: Mapping[str, np.ndarray]) -> None:
    """Assign checkpoint arrays into an existing parameter dict, by name."""
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in params.items():
        t.assign_(state[name])


def zeros(shape: Iterable[int] | int) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    return Tensor(np.zeros(tuple(shape)))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))
