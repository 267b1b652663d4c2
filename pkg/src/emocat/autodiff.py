"""Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is built eagerly (define-by-run): every operation computes its
value immediately and records a closure that maps the upstream gradient to
gradients for its parents.  ``backward`` walks the graph in reverse
topological order.  A node may carry a gradient transform; it is applied to
the gradient passed *through* the node to its parents, never to the node's
own ``grad``.
"""
from contextlib import contextmanager

import numpy as np

from emocat import kernels


class GraphError(ValueError):
    """Raised when operands cannot be combined or the graph is misused."""


_grad_enabled = True
_transforms_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def transforms_disabled():
    """Treat every attached gradient transform as identity (used by grad_check)."""
    global _transforms_enabled
    prev, _transforms_enabled = _transforms_enabled, False
    try:
        yield
    finally:
        _transforms_enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    """A float64 array plus its node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "name",
                 "_backward", "grad_transform")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = ()
        self.op = "leaf"
        self.name = name
        self._backward = None
        self.grad_transform = None

    @classmethod
    def _make(cls, data, parents, op, backward):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out.op = op
            out._backward = backward
        return out

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    # ---------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_shape("add", self, other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other), "add",
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_shape("sub", self, other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other), "sub",
                            lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_shape("mul", self, other)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other), "mul",
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_shape("div", self, other)
        x, y = self.data, other.data
        return Tensor._make(x / y, (self, other), "div",
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        x = self.data
        return Tensor._make(x ** p, (self,), "pow", lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, w = self.data, other.data
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise GraphError(f"matmul: incompatible shapes {x.shape} and {w.shape}")

        def backward(g):
            gx = g @ w.T
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gw

        return Tensor._make(x @ w, (self, other), "matmul", backward)

    # ---------------------------------------------------------- elementwise

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), "exp", lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), "log", lambda g: (g / x,))

    def sin(self):
        x = self.data
        return Tensor._make(np.sin(x), (self,), "sin", lambda g: (g * np.cos(x),))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), "tanh", lambda g: (g * (1.0 - y * y),))

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(y, (self,), "sigmoid", lambda g: (g * y * (1.0 - y),))

    def relu(self):
        x = self.data
        return Tensor._make(np.maximum(x, 0.0), (self,), "relu", lambda g: (g * (x > 0),))

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), "abs", lambda g: (g * np.sign(x),))

    # ---------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def softmax(self, axis=-1):
        e = np.exp(self.data - self.data.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return Tensor._make(y, (self,), "softmax", backward)

    def log_softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        p = np.exp(y)

        def backward(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(y, (self,), "log_softmax", backward)

    # ---------------------------------------------------------- shape ops

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), "reshape",
                            lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), "transpose",
                            lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), "slice", backward)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise GraphError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax),
                        tuple(tensors), "concat", backward)


def identity(x):
    """A pass-through node; a convenient anchor for gradient transforms."""
    return Tensor._make(x.data.copy(), (x,), "identity", lambda g: (g,))


def broadcast_time(v, T):
    """(B, D) -> (B, T, D) by repeating every row T times."""
    B, D = v.shape
    return Tensor._make(np.broadcast_to(v.data[:, None, :], (B, T, D)).copy(), (v,),
                        "broadcast_time", lambda g: (g.sum(axis=1),))


def conv1d(x, w, b):
    """Same-padded convolution: x (B, T, C), w (K, C, O), b (O,)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or b.shape != (w.shape[2],):
        raise GraphError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    if w.shape[0] % 2 != 1:
        raise GraphError(f"conv1d: kernel width must be odd, got {w.shape[0]}")
    out, cols = kernels.conv1d_forward(np.ascontiguousarray(x.data), w.data, b.data)
    T = x.shape[1]
    wd = w.data

    def backward(g):
        return kernels.conv1d_backward(np.ascontiguousarray(g), cols, wd, T)

    return Tensor._make(out, (x, w, b), "conv1d", backward)


def lstm_sequence(x, W, U, b):
    """Uni-directional LSTM over (B, T, I); returns hidden states (B, T, H)."""
    H = U.shape[0]
    if x.shape[-1] != W.shape[0] or W.shape[1] != 4 * H or U.shape[1] != 4 * H:
        raise GraphError(f"lstm: incompatible shapes {x.shape} and {W.shape}")
    xd = x.data
    xw = np.ascontiguousarray((xd @ W.data + b.data).transpose(1, 0, 2))
    hs, cs, gates = kernels.lstm_forward(xw, U.data)
    Ud, Wd = U.data, W.data

    def backward(g):
        dxw, dU = kernels.lstm_backward(np.ascontiguousarray(g.transpose(1, 0, 2)), hs, cs, gates, Ud)
        dxw = dxw.transpose(1, 0, 2)
        dW = xd.reshape(-1, xd.shape[-1]).T @ dxw.reshape(-1, 4 * H)
        return dxw @ Wd.T, dW, dU, dxw.sum(axis=(0, 1))

    return Tensor._make(hs[1:].transpose(1, 0, 2).copy(), (x, W, U, b), "lstm", backward)


def gru_sequence(x, W, U, b, lengths=None):
    """GRU over (B, T, I); returns (B, T, H).

    With ``lengths`` the state is frozen past each sequence end, so the last
    time step always holds the final state of every sequence.
    """
    H = U.shape[0]
    if x.shape[-1] != W.shape[0] or W.shape[1] != 3 * H or U.shape[1] != 3 * H:
        raise GraphError(f"gru: incompatible shapes {x.shape} and {W.shape}")
    B, T = x.shape[:2]
    if lengths is None:
        mask = np.ones((T, B))
    else:
        mask = (np.arange(T)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64)
    xd = x.data
    xw = np.ascontiguousarray((xd @ W.data + b.data).transpose(1, 0, 2))
    hs, gates = kernels.gru_forward(xw, U.data, mask)
    Ud, Wd = U.data, W.data

    def backward(g):
        dxw, dU = kernels.gru_backward(np.ascontiguousarray(g.transpose(1, 0, 2)), hs, gates, Ud, mask)
        dxw = dxw.transpose(1, 0, 2)
        dW = xd.reshape(-1, xd.shape[-1]).T @ dxw.reshape(-1, 3 * H)
        return dxw @ Wd.T, dW, dU, dxw.sum(axis=(0, 1))

    return Tensor._make(hs[1:].transpose(1, 0, 2).copy(), (x, W, U, b), "gru", backward)


# -------------------------------------------------------------- traversal


def topological_order(root):
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
    return order


def forward(root):
    """Return the value of ``root``; values are computed when nodes are built."""
    if root.data is None:
        raise GraphError("node has no value")
    return root.data


def backward(loss):
    """Populate ``.grad`` with d(loss)/d(node) for every node reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are reset.
    """
    if loss.data is None:
        raise GraphError("backward called before the loss was evaluated")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if g is None or node._backward is None:
            continue
        if node.grad_transform is not None and _transforms_enabled:
            g = node.grad_transform(g, node)
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


# -------------------------------------------------------------- checking


def grad_check(builder, inputs, h=1e-5, max_entries=None, seed=0, floor=1e-8):
    """Largest relative error between backprop and central differences.

    ``builder`` maps a list of leaf Tensors to a scalar Tensor.  Gradient
    transforms are disabled during the check.  With ``max_entries`` only a
    random subset of that many entries per input is probed.  The relative
    error's denominator is floored at ``floor``.  Central differences cannot
    resolve a derivative much below ulp(loss) / h, so entries smaller than
    that need a larger floor (see ``roundoff_floor``).
    """
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in inputs]

    def evaluate(arrs):
        with no_grad(), transforms_disabled():
            out = builder([Tensor(a) for a in arrs])
        return float(np.asarray(out.data).reshape(-1)[0])

    f0 = evaluate(arrays)
    if evaluate(arrays) != f0:
        raise GraphError("grad_check: builder is not deterministic")

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with transforms_disabled():
        loss = builder(leaves)
        backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            hi, lo = old + h, old - h
            flat[i] = hi
            fp = evaluate(arrays)
            flat[i] = lo
            fm = evaluate(arrays)
            flat[i] = old
            num = (fp - fm) / (hi - lo)  # the step actually taken, free of representation error
            an = analytic.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, err)
    return worst


def roundoff_floor(loss_value, h=1e-5, rtol=1e-4, ulps=2):
    """Smallest derivative that central differences at step ``h`` can certify to ``rtol``.

    Each of f(x+h), f(x-h) is taken to be good to about one ulp, so the
    difference quotient carries an absolute error near ``ulps * ulp(f) / 2h``.
    """
    return ulps * float(np.spacing(abs(loss_value))) / (2 * h) / rtol
