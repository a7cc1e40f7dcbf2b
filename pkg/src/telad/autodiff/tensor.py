"""Dense float64 tensors with reverse-mode differentiation.

Every operator returns a new :class:`Tensor`; when any input requires a
gradient the output keeps references to its parents and a closure that maps
the output gradient to parent gradients.  :func:`backward` topologically
sorts that implicit graph and runs the closures once each, in reverse.
"""

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ConfigurationError, ContractError, DataError, DimensionError
from . import kernels

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, *, _check=True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise DataError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self, leaves=None):
        backward(self, leaves)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{tag}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), fn, "mul")


def affine_modulate(x, gamma, beta):
    """``(1 + gamma) * x + beta`` with broadcasting (FiLM)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_broadcast("affine_modulate", x, gamma)
    _check_broadcast("affine_modulate", x, beta)
    scale = 1.0 + gamma.data

    def fn(g):
        gx = _unbroadcast(g * scale, x.shape) if x.requires_grad else None
        gg = _unbroadcast(g * x.data, gamma.shape) if gamma.requires_grad else None
        return gx, gg, _unbroadcast(g, beta.shape)

    return _node(scale * x.data + beta.data, (x, gamma, beta), fn, "affine_modulate")


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x):
    x = as_tensor(x)
    if (x.data < 0).any():
        raise DataError("sqrt of negative value")
    out = np.sqrt(x.data)

    def fn(g):
        # subgradient 0 at the origin keeps RMSE of a perfect fit finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (x,), fn, "sqrt")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, (x,), fn, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims) if axes else x.data.copy()

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _node(out, (x,), fn, "mean")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), fn, "softmax")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


def conv1d(x, w):
    """Length-preserving 1-D cross-correlation.

    ``x`` is (B, L, C_in), ``w`` is (K, C_in, C_out).  Zero padding of
    ``(K-1)//2`` on the left and the remainder on the right keeps L.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise DimensionError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    B, L, C = x.shape
    K, _, O = w.shape
    left = (K - 1) // 2
    xp = np.zeros((B, L + K - 1, C))
    xp[:, left:left + L] = x.data
    cols = np.stack([xp[:, i:i + L] for i in range(K)], axis=2).reshape(B * L, K * C)
    w2 = w.data.reshape(K * C, O)
    out = (cols @ w2).reshape(B, L, O)

    def fn(g):
        g2 = g.reshape(B * L, O)
        gx = gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(K, C, O)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, L, K, C)
            gxp = np.zeros((B, L + K - 1, C))
            for i in range(K):
                gxp[:, i:i + L] += gcols[:, :, i]
            gx = gxp[:, left:left + L]
        return gx, gw

    return _node(out, (x, w), fn, "conv1d")


# ---------------------------------------------------------------- structure


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, fn, "concat")


def slice_(x, key):
    x = as_tensor(x)
    out = x.data[key]

    fancy = any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def fn(g):
        full = np.zeros(x.shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _node(np.array(out), (x,), fn, "slice")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _node(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def embedding(table, codes):
    """Row lookup ``table[codes]``; output shape is ``codes.shape + (E,)``."""
    table = as_tensor(table)
    codes = np.asarray(codes, dtype=np.int64)
    V, E = table.shape
    if codes.size and (codes.min() < 0 or codes.max() >= V):
        raise ContractError(f"embedding code out of range [0, {V})")
    out = table.data[codes]

    def fn(g):
        gt = np.zeros((V, E))
        np.add.at(gt, codes.reshape(-1), g.reshape(-1, E))
        return (gt,)

    return _node(out, (table,), fn, "embedding")


def dropout(x, rate, rng):
    """Inverted dropout with a mask drawn from ``rng``."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask, _check=False))


# ---------------------------------------------------------------- recurrence


def gru(x, h0, w_x, w_h, b_x, b_h, steps=None):
    """Single-layer GRU over a whole sequence; returns (B, T, H) states.

    With ``x=None`` the cell runs autonomously for ``steps`` steps, feeding
    its previous hidden state back as the input (``w_x`` is then (H, 3H)).
    """
    h0, w_x, w_h, b_x, b_h = (as_tensor(t) for t in (h0, w_x, w_h, b_x, b_h))
    B, H = h0.shape
    if w_h.shape != (H, 3 * H) or b_h.shape != (3 * H,) or b_x.shape != (3 * H,):
        raise DimensionError(f"gru: hidden-side shapes {w_h.shape}, {b_h.shape} for H={H}")
    autonomous = x is None
    if autonomous:
        if w_x.shape != (H, 3 * H) or not steps:
            raise DimensionError(f"gru: autonomous mode needs w_x {(H, 3 * H)} and steps > 0")
        parents = (h0, w_x, w_h, b_x, b_h)
        hs, cache = kernels.gru_forward(None, h0.data, w_h.data, b_h.data,
                                        w_x.data, b_x.data, steps=int(steps))
        T = int(steps)
    else:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[0] != B or w_x.shape != (x.shape[2], 3 * H):
            raise DimensionError(f"gru: input {x.shape} / w_x {w_x.shape} / h0 {h0.shape}")
        parents = (x, h0, w_x, w_h, b_x, b_h)
        T, D = x.shape[1], x.shape[2]
        xp = (x.data.reshape(B * T, D) @ w_x.data + b_x.data).reshape(B, T, 3 * H)
        xp = np.ascontiguousarray(xp.transpose(1, 0, 2))
        hs, cache = kernels.gru_forward(xp, h0.data, w_h.data, b_h.data)
    out = np.ascontiguousarray(hs.transpose(1, 0, 2))

    def fn(g):
        dhs = np.ascontiguousarray(g.transpose(1, 0, 2))
        dgx, dgh, dh0 = kernels.gru_backward(dhs, cache, h0.data, hs, w_h.data,
                                             w_x.data if autonomous else None)
        hprev = np.concatenate([h0.data[None], hs[:-1]], axis=0).reshape(T * B, H)
        dgh2 = dgh.reshape(T * B, 3 * H)
        dw_h = hprev.T @ dgh2
        db_h = dgh2.sum(axis=0)
        if autonomous:
            dgx2 = dgx.reshape(T * B, 3 * H)
            return dh0, hprev.T @ dgx2, dw_h, dgx2.sum(axis=0), db_h
        dxp = dgx.transpose(1, 0, 2).reshape(B * T, 3 * H)
        dx = (dxp @ w_x.data.T).reshape(B, T, D) if x.requires_grad else None
        dw_x = x.data.reshape(B * T, D).T @ dxp
        return dx, dh0, dw_x, dw_h, dxp.sum(axis=0), db_h

    return _node(out, parents, fn, "gru")


# ---------------------------------------------------------------- dispatch and graph


def _slice_op(x, key=None):
    return slice_(x, key)


OPS = {
    "matmul": matmul,
    "conv1d": conv1d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
    "slice": _slice_op,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
    "mean": mean,
    "sum": sum_,
    "square": square,
    "sqrt": sqrt,
    "affine_modulate": affine_modulate,
    "reshape": reshape,
    "transpose": transpose,
    "embedding": embedding,
    "gru": gru,
}


def forward_op(tag, inputs, **attrs):
    """Apply operator ``tag`` to ``inputs`` (a list of tensors)."""
    try:
        fn = OPS[tag]
    except KeyError:
        raise ConfigurationError(f"unknown operator {tag!r}") from None
    return fn(*inputs, **attrs)


class ComputeGraph:
    """Topologically ordered nodes reachable from ``root``."""

    def __init__(self, root):
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.root = root

    @property
    def leaves(self):
        return [n for n in self.nodes if not n.parents and n.requires_grad]


def backward(loss, leaves=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``leaves`` that are not on a path to ``loss`` get an
    explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                g = np.array(g, dtype=np.float64).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for leaf in leaves or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape)
    return graph
