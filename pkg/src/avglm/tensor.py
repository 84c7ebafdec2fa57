"""Dense tensors with tape-ordered reverse-mode differentiation.

Every op that has at least one input with ``requires_grad`` records itself
by stamping the output with a monotonically increasing sequence number and a
closure that pushes the output gradient back into the inputs. ``backward``
collects the ops reachable from the loss and replays them in reverse
execution order, so a graph is simply the set of stamped nodes reachable
from a loss.

Gradients are always accumulated (``grad = grad + g``), never overwritten,
and never modified in place. This keeps weight tying and recurrent reuse
correct and makes it safe for two tensors to share a gradient buffer.
"""

import contextlib
import itertools

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "elementwise",
    "add_bias",
    "scale",
    "concat_cols",
    "slice_cols",
    "concat_rows",
    "slice_rows",
    "take_rows",
    "transpose",
    "sum",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
]

_clock = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A numpy array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_clock)
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g @ bd.T)
        if b.requires_grad:
            _accumulate(b, ad.T @ g)

    return _result(ad @ bd, (a, b), _backward)


def add(a, b):
    _same_shape("add", a, b)

    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b):
    _same_shape("sub", a, b)

    def _backward(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g * bd)
        if b.requires_grad:
            _accumulate(b, g * ad)

    return _result(ad * bd, (a, b), _backward)


def _sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    s = _sigmoid(a.data)

    def _backward(g):
        _accumulate(a, g * s * (1 - s))

    return _result(s, (a,), _backward)


def tanh(a):
    t = np.tanh(a.data)

    def _backward(g):
        _accumulate(a, g * (1 - t * t))

    return _result(t, (a,), _backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op, *args):
    """Dispatch one of ``add``, ``sub``, ``mul``, ``sigmoid``, ``tanh`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x, b):
    """Add the vector ``b`` to every row of ``x`` (the only broadcast supported)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")

    def _backward(g):
        _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _result(x.data + b.data, (x, b), _backward)


def scale(a, k):
    """Multiply by a constant scalar."""
    k = float(k)

    def _backward(g):
        _accumulate(a, g * k)

    return _result(a.data * a.data.dtype.type(k), (a,), _backward)


def concat_cols(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ for {a.shape} and {b.shape}")
    p = a.shape[1]

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, g[:, :p])
        if b.requires_grad:
            _accumulate(b, g[:, p:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), _backward)


def slice_cols(a, start, stop):
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop], (a,), _backward)


def concat_rows(tensors):
    tensors = tuple(tensors)
    widths = {t.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ: {sorted(widths)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, g[lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=0), tensors, _backward)


def slice_rows(a, start, stop):
    if not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop], (a,), _backward)


def take_rows(table, ids):
    """Gather rows of ``table``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")

    def _backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _result(table.data[ids], (table,), _backward)


def transpose(a):
    def _backward(g):
        _accumulate(a, g.T)

    return _result(a.data.T, (a,), _backward)


def sum(a):  # noqa: A001 - mirrors numpy naming
    def _backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(), (a,), _backward)


def softmax_cross_entropy(logits, targets, mask=None):
    """Masked mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Returns ``(loss, log_probs)``; ``log_probs`` is a plain tensor with no
    graph attached.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    m, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (m,) or mask.shape != (m,):
        raise DimensionError(
            f"softmax_cross_entropy: targets {targets.shape} / mask {mask.shape} vs logits {logits.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"softmax_cross_entropy: target out of range for vocabulary of {vocab}")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("softmax_cross_entropy: mask selects no rows")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(m)
    picked = log_probs[rows, targets]
    loss = -picked[mask].sum() / count

    def _backward(g):
        d = np.exp(log_probs)
        d[rows, targets] -= 1
        d *= (mask / count).astype(d.dtype)[:, None]
        _accumulate(logits, d * g)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _backward), Tensor(log_probs)


def _graph(loss):
    """Nodes reachable from ``loss`` that carry a backward closure, newest first."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    return nodes


def backward(loss):
    """Populate ``grad`` on every ``requires_grad`` ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that is not part of a graph")
    _accumulate(loss, np.ones_like(loss.data))
    for node in _graph(loss):
        if node.grad is not None:
            node._backward(node.grad)


def grad_check(f, point, eps=1e-6):
    """Worst relative error between autodiff and central differences.

    ``f`` maps ``point`` (a double-precision tensor with ``requires_grad``)
    to a scalar tensor. Each element of ``point`` is perturbed in turn.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    if point.dtype != np.float64:
        raise ContractError("grad_check requires a float64 point")

    if not point.data.flags.c_contiguous:
        point.data = np.ascontiguousarray(point.data)
    point.grad = None
    out = f(point)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f returned a non-finite value")
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else np.array(point.grad, copy=True)

    numeric = np.empty_like(point.data)
    flat = point.data.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(point).item()
            flat[k] = orig - eps
            fm = f(point).item()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"f is non-finite near element {k}")
            numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
