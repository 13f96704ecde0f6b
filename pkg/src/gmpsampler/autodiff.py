"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every operation on :class:`Tensor` values records a node holding its parents
and a vector-Jacobian closure whenever at least one input requires a
gradient.  :func:`backward` sorts the recorded graph topologically and
propagates adjoints in reverse, visiting every node once.  Graphs are
single-use: a second :func:`backward` on the same output raises.

Broadcasting follows numpy rules; adjoints are summed back to the operand
shape.
"""

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "DomainError", "BackwardError",
    "as_tensor", "no_grad", "is_grad_enabled", "backward", "grad",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh",
    "softplus", "sigmoid", "square", "sqrt", "sum", "mean", "logsumexp",
    "broadcast_to", "concat", "stack", "reshape", "transpose", "getitem",
    "stop_gradient", "where",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class BackwardError(RuntimeError):
    """Invalid use of the backward pass."""


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp",
                 "_op", "_consumed", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power == 2:
            return square(self)
        raise NotImplementedError("only square (power 2) is supported")

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` holds the last backward result."""

    __slots__ = ("name",)

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


def custom_op(data, parents, vjp, op):
    """Record a user-defined node: ``vjp(g)`` returns one gradient (or None) per parent."""
    return _record(np.asarray(data, dtype=np.float64), tuple(parents), vjp, op)


def unbroadcast(g, shape):
    return _unbroadcast(g, shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(fn, a, b, op):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              -_unbroadcast(g, sb) if b.requires_grad else None), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _record(_binary(np.multiply, a, b, "mul"), (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = _binary(np.divide, a, b, "div")

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _record(out, (a, b), vjp, "div")


def where(cond, a, b):
    """Select ``a`` where ``cond`` is true, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _record(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# elementwise unary ops

def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid_np(ad),),
                   "softplus")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def stop_gradient(a):
    """Return the value of ``a`` with all adjoint flow blocked."""
    return Tensor(as_tensor(a).data)


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, shape, axes, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean: empty reduction")
    shape = a.shape
    return _record(a.data.mean(axis=axes, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,),
                   "mean")


def logsumexp(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    m = np.max(ad, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(ad - m), axis=axes, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axes)

    def vjp(g):
        soft = np.exp(ad - s)
        return (_expand_reduced(g, ad.shape, axes, keepdims) * soft,)
    return _record(out, (a,), vjp, "logsumexp")


# shape ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: operands must be at least 1-D")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if ad.ndim == 1:
                ga = np.squeeze(ga, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if bd.ndim == 1:
                gb = np.squeeze(gb, -1)
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb
    return _record(out, (a, b), vjp, "matmul")


def dense(x, w, b, activation=None):
    """Fused ``act(x @ w + b)`` for a (B, m) batch; ``activation`` is None or "tanh"."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: incompatible shapes {x.shape} @ {w.shape} + {b.shape}")
    xd, wd, sb = x.data, w.data, b.shape
    z = xd @ wd + b.data
    if activation == "tanh":
        out = np.tanh(z)
    elif activation is None:
        out = z
    else:
        raise ValueError(f"dense: unknown activation {activation!r}")

    def vjp(g):
        d = g * (1.0 - out * out) if activation == "tanh" else g
        return (d @ wd.T if x.requires_grad else None,
                xd.T @ d if w.requires_grad else None,
                _unbroadcast(d, sb) if b.requires_grad else None)
    return _record(out, (x, w, b), vjp, "dense")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return _record(out, (a,), lambda g: (_unbroadcast(g, sa),), "broadcast")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    sa = a.shape
    return _record(out, (a,), lambda g: (g.reshape(sa),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record(out, ts, vjp, "concat")


def stack(tensors, axis=0):
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return _record(out, ts, vjp, "stack")


def getitem(a, idx):
    """Slice or fancy-index ``a``; the adjoint scatters back with ``np.add.at``."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(int)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice))
                for p in parts)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _record(np.array(out, dtype=np.float64), (a,), vjp, "slice")


# backward pass

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output, params=None):
    """Propagate adjoints from the scalar ``output``.

    Leaf tensors that require grad receive their gradient in ``.grad``
    (overwritten, not accumulated).  Returns the gradients of ``params`` when
    given, otherwise a dict ``{id(leaf): grad}``.
    """
    if not isinstance(output, Tensor):
        raise BackwardError("backward: output must be a Tensor")
    if output.data.size != 1:
        raise BackwardError(f"backward: output must be scalar, got shape {output.shape}")
    if output._consumed:
        raise BackwardError("backward: graph already consumed; re-run the forward pass")
    if not output.requires_grad:
        raise BackwardError("backward: output does not depend on any parameter")

    order = _topological(output)
    if any(node._consumed for node in order):
        raise BackwardError("backward: graph already consumed; re-run the forward pass")
    adj = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[id(node)] = (node, g)
            continue
        grads = node._vjp(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    for node in order:
        if node._vjp is not None:
            node._consumed = True
            node._vjp = None
            node._parents = ()
    output._consumed = True

    for node, g in leaves.values():
        node.grad = np.array(np.broadcast_to(g, node.shape))
    if params is None:
        return {k: v[0].grad for k, v in leaves.items()}
    out = []
    for p in params:
        if id(p) in leaves:
            out.append(p.grad)
        else:
            p.grad = np.zeros_like(p.data)
            out.append(p.grad)
    return out


def grad(fn, *args):
    """Gradient of scalar ``fn(*args)`` with respect to every positional arg."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    out = fn(*leaves)
    gs = backward(out, leaves)
    return gs[0] if len(gs) == 1 else gs
