"""Small dense reverse-mode autodiff engine over float64 numpy arrays.

Every trainable quantity in the package is a :class:`Tensor`.  Operations
record their parents and a closure that pushes the upstream gradient back;
:func:`backward` walks the graph in reverse topological order.

Broadcasting is limited to what numpy gives for ``(n, m) op (m,)`` and
``(n, m) op (n, 1)``; gradients are reduced back to the operand shape.
"""
import itertools

import numpy as np

EPS_NORM = 1e-12

_ids = itertools.count()


class NumericError(ArithmeticError):
    """A non-finite value showed up in a forward or backward pass."""


class DegenerateVectorError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "id", "_parents", "_backward", "name", "grad")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor ({_op})")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self.id = next(_ids)
        self._parents = _parents
        self._backward = None
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, k):
        return scale(self, 1.0 / k)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def _node(data, parents, op, backward):
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out.op = op
    out.id = next(_ids)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out.grad = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", bw)


def scale(a, k):
    k = float(k)

    def bw(g):
        return (g * k,)

    return _node(a.data * k, (a,), "scale", bw)


def mul(a, b):
    """Elementwise product (same shape, or matrix times broadcast vector)."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ValueError("matmul supports vectors and matrices only")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def dot(a, b):
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError("dot expects two vectors")
    return matmul(a, b)


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), "exp", bw)


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")

    def bw(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), "log", bw)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), "sum", bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis=None):
    """Stable log-sum-exp (max subtracted before exponentiation)."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def bw(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        return (gk * soft,)

    return _node(np.asarray(out.squeeze() if axis is None else out.squeeze(axis)), (a,), "logsumexp", bw)


def l2_normalize(a, eps=EPS_NORM):
    """Unit-normalize a vector, or every row of a matrix."""
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateVectorError(f"cannot normalize vector with norm <= {eps}")
    out = a.data / norms

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * proj) / norms,)

    return _node(out, (a,), "l2_normalize", bw)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concatenate", bw)


def take(a, idx, axis=0):
    """Gather along ``axis`` (integer, slice or index array); rows by default."""
    if isinstance(idx, (list, tuple)):
        idx = np.asarray(idx, dtype=np.intp)
    src = np.moveaxis(a.data, axis, 0)

    def bw(g):
        full = np.zeros_like(src)
        if isinstance(idx, slice):
            full[idx] += np.moveaxis(g, axis, 0) if np.ndim(g) == src.ndim else g
        else:
            gm = np.moveaxis(g, axis, 0) if np.ndim(idx) > 0 else g
            np.add.at(full, idx, gm)
        return (np.moveaxis(full, 0, axis),)

    out = np.array(src[idx])
    if np.ndim(idx) > 0 or isinstance(idx, slice):
        out = np.moveaxis(out, 0, axis)
    return _node(out, (a,), "take", bw)


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a):
    def bw(g):
        return (g.T,)

    return _node(a.data.T.copy(), (a,), "transpose", bw)


def detach(a):
    """Same values, no gradient path."""
    return Tensor(a.data.copy(), requires_grad=False, _op="detach")


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Gradients of a scalar ``loss`` with respect to every trainable leaf.

    Returns ``{leaf: ndarray}`` (keyed by the leaf tensor object) and also
    stores each result on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at node {node.id} ({node.op})")
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


def finite_diff(f, params, eps=1e-5):
    """Central-difference gradient of ``f()`` w.r.t. each tensor in ``params``.

    ``f`` takes no arguments and reads the current values of ``params``; each
    coordinate is perturbed in place and restored.  Returns ``{tensor: ndarray}``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = {}
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = _scalar(f())
            flat[k] = orig - eps
            lo = _scalar(f())
            flat[k] = orig
            g[k] = (hi - lo) / (2 * eps)
        out[p] = g.reshape(p.shape)
    return out


def _scalar(v):
    v = v.item() if isinstance(v, Tensor) else float(v)
    if not np.isfinite(v):
        raise NumericError("objective returned a non-finite value")
    return v


def max_rel_error(g_ad, g_fd):
    """max |g_ad - g_fd| / max(1, |g_fd|) over all coordinates."""
    g_ad, g_fd = np.asarray(g_ad), np.asarray(g_fd)
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd)), initial=0.0))
