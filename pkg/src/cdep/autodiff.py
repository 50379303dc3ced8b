"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations on tracked tensors record a
graph node holding the parent tensors and a backward rule; ``backward``
replays the rules in reverse topological order. Rules are written against a
small polymorphic surface (operators plus ``sum``/``reshape``/``transpose``)
so the same rule can run on raw arrays (fast path) or on tracked tensors
(``backward_as_graph``, which makes the returned gradients differentiable in
turn). Convolution, pooling and gather rules support only the fast path and
raise ``UnsupportedOpError`` when a differentiable backward is requested.

Everything runs in float64 so finite-difference checks and the decomposition
completeness identity hold to tight tolerance.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class UnsupportedOpError(RuntimeError):
    """Raised when an op lacks the requested backward capability."""


# ---------------------------------------------------------------------------
# allocation high-water tracking (portable peak-memory instrumentation)

_mem_live = 0
_mem_peak = 0


def _mem_acquire(nbytes):
    global _mem_live, _mem_peak
    _mem_live += nbytes
    if _mem_live > _mem_peak:
        _mem_peak = _mem_live


def _mem_release(nbytes):
    global _mem_live
    _mem_live -= nbytes


def memory_stats():
    """Current and peak live tensor bytes since the last reset."""
    return {"live_bytes": _mem_live, "peak_bytes": _mem_peak}


def reset_peak_memory():
    global _mem_peak
    _mem_peak = _mem_live


# ---------------------------------------------------------------------------
# grad mode

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class GraphNode:
    """Backward bookkeeping for one op application.

    ``parents`` are the input tensors, ``aux`` holds constants the rule needs
    (shapes, masks, indices). ``rule(out, grad, vals, aux)`` returns one
    gradient per parent (or None for non-differentiable inputs); ``out``,
    ``grad`` and ``vals`` are arrays on the fast path and tensors in graph
    mode.
    """

    __slots__ = ("op", "parents", "aux", "rule")

    def __init__(self, op, parents, aux, rule):
        self.op = op
        self.parents = parents
        self.aux = aux
        self.rule = rule


class Tensor:
    """N-dimensional float64 array, optionally attached to the autodiff graph.

    Tensors compare and hash by identity so they can key gradient maps.
    Untracked tensors are plain immutable values; tracked ones carry the
    node that produced them (leaves carry a sentinel leaf node).
    """

    __slots__ = ("data", "node", "grad", "__weakref__")

    def __init__(self, data, track=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node = GraphNode("leaf", (), None, None) if track else None
        self.grad = None
        _mem_acquire(arr.nbytes)
        weakref.finalize(self, _mem_release, arr.nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        return self.node is not None

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, cut loose from the graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    # operators -------------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    # method forms used by backward rules (array-compatible signatures) ------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError(f"T expects a 2-d tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, aux, rule):
    """Build the output tensor, attaching a node when tracking applies."""
    out = Tensor(data)
    if _grad_enabled and any(p.node is not None for p in parents):
        out.node = GraphNode(op, parents, aux, rule)
    return out


# polymorphic helpers shared by backward rules -------------------------------

def _exp_of(v):
    return v.exp() if isinstance(v, Tensor) else np.exp(v)


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if tuple(_shape_of(g)) == tuple(shape):
        return g
    extra = len(_shape_of(g)) - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and _shape_of(g)[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape_of(v):
    return v.shape


def _require_fast(grad, op):
    if isinstance(grad, Tensor):
        raise UnsupportedOpError(f"op '{op}' has no differentiable backward rule")


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.add, a, b, "add")

    def rule(out, g, vals, aux):
        sa, sb = aux
        return _sum_to(g, sa), _sum_to(g, sb)

    return _make(data, "add", (a, b), (a.shape, b.shape), rule)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.subtract, a, b, "sub")

    def rule(out, g, vals, aux):
        sa, sb = aux
        return _sum_to(g, sa), -_sum_to(g, sb)

    return _make(data, "sub", (a, b), (a.shape, b.shape), rule)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.multiply, a, b, "mul")

    def rule(out, g, vals, aux):
        av, bv = vals
        sa, sb = aux
        return _sum_to(g * bv, sa), _sum_to(g * av, sb)

    return _make(data, "mul", (a, b), (a.shape, b.shape), rule)


def div(a, b, eps=0.0):
    """Elementwise a / (b + eps); eps > 0 guards vanishing denominators."""
    a, b = _wrap(a), _wrap(b)
    denom = b.data + eps
    data = _broadcast_op_raw(np.divide, a.data, denom, a.shape, b.shape, "div")

    def rule(out, g, vals, aux):
        av, bv = vals
        sa, sb, e = aux
        ga = g / (bv + e)
        return _sum_to(ga, sa), _sum_to(-ga * out, sb)

    return _make(data, "div", (a, b), (a.shape, b.shape, eps), rule)


def neg(a):
    a = _wrap(a)

    def rule(out, g, vals, aux):
        return (-g,)

    return _make(-a.data, "neg", (a,), None, rule)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def rule(out, g, vals, aux):
        av, bv = vals
        return g @ bv.T, av.T @ g

    return _make(data, "matmul", (a, b), None, rule)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def rule(out, g, vals, aux):
        return (g * aux,)

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), mask.astype(np.float64), rule)


def abs_(a):
    a = _wrap(a)
    sign = np.sign(a.data)  # sign(0) = 0, matching the relu kink convention

    def rule(out, g, vals, aux):
        return (g * aux,)

    return _make(np.abs(a.data), "abs", (a,), sign, rule)


def exp(a):
    a = _wrap(a)

    def rule(out, g, vals, aux):
        return (g * out,)

    return _make(np.exp(a.data), "exp", (a,), None, rule)


def log(a):
    """Natural log; callers must keep inputs strictly positive."""
    a = _wrap(a)

    def rule(out, g, vals, aux):
        (av,) = vals
        return (g / av,)

    return _make(np.log(a.data), "log", (a,), None, rule)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(out, g, vals, aux):
        in_shape, ax, keep = aux
        return (_spread(g, in_shape, ax, keep),)

    return _make(data, "sum", (a,), (a.shape, axis, keepdims), rule)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(
        np.prod([a.shape[i] for i in _norm_axes(axis, a.data.ndim)]))

    def rule(out, g, vals, aux):
        in_shape, ax, keep, n = aux
        return (_spread(g, in_shape, ax, keep) * (1.0 / n),)

    return _make(data, "mean", (a,), (a.shape, axis, keepdims, count), rule)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, in_shape, axis, keepdims):
    """Broadcast a reduction gradient back over the reduced axes."""
    if not keepdims:
        kept = [1 if i in _norm_axes(axis, len(in_shape)) else n
                for i, n in enumerate(in_shape)]
        g = g.reshape(tuple(kept))
    ones = np.ones(in_shape)
    return g * ones


def softmax(a):
    """Softmax over the last axis (numerically stabilized)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def rule(out, g, vals, aux):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(data, "softmax", (a,), None, rule)


def log_softmax(a):
    """log(softmax) over the last axis via the log-sum-exp identity."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def rule(out, g, vals, aux):
        return (g - _exp_of(out) * g.sum(axis=-1, keepdims=True),)

    return _make(data, "log_softmax", (a,), None, rule)


def reshape(a, shape):
    a = _wrap(a)
    if isinstance(shape, int):
        shape = (shape,)
    data = a.data.reshape(shape)

    def rule(out, g, vals, aux):
        return (g.reshape(aux),)

    return _make(data, "reshape", (a,), a.shape, rule)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(out, g, vals, aux):
        return (g.transpose(aux),)

    return _make(a.data.transpose(axes), "transpose", (a,), inverse, rule)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def rule(out, g, vals, aux):
        ax, sz = aux
        _require_fast(g, "concat")
        offsets = np.cumsum(sz)[:-1]
        return tuple(np.split(g, offsets, axis=ax))

    return _make(data, "concat", tuple(tensors), (axis, sizes), rule)


def mask_select(a, mask):
    """Entries of ``a`` where the boolean mask is true, as a 1-d tensor."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor shape {a.shape}")

    def rule(out, g, vals, aux):
        _require_fast(g, "mask_select")
        gx = np.zeros(aux[1])
        gx[aux[0]] = g
        return (gx,)

    return _make(a.data[mask], "mask_select", (a,), (mask, a.shape), rule)


def l1norm(a, axis=None):
    """Sum of absolute values over the given axes."""
    return sum_(abs_(a), axis=axis)


def conv2d(x, w):
    """Valid 2-d convolution, stride 1: (N,C,H,W) * (O,C,kh,kw) -> (N,O,OH,OW).

    Realized as a patch-matrix (im2col) expansion followed by a matmul, so
    the fast backward is two matmuls plus a slice-accumulate scatter.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes do not conform: {x.shape} * {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh > h or kw > wd:
        raise ShapeError(f"conv2d kernel {w.shape} larger than input {x.shape}")
    oh, ow = h - kh + 1, wd - kw + 1
    cols = _im2col(x.data, kh, kw)  # (N*OH*OW, C*kh*kw)
    data = (cols @ w.data.reshape(o, -1).T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def rule(out, g, vals, aux):
        _require_fast(g, "conv2d")
        xv, wv = vals
        cols_, (oh_, ow_) = aux
        gm = g.transpose(0, 2, 3, 1).reshape(-1, wv.shape[0])  # (N*OH*OW, O)
        gw = (gm.T @ cols_).reshape(wv.shape)
        gcols = gm @ wv.reshape(wv.shape[0], -1)
        return _col2im(gcols, xv.shape, wv.shape[2], wv.shape[3]), gw

    return _make(data, "conv2d", (x, w), (cols, (oh, ow)), rule)


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N,C,OH,OW,kh,kw)
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * (h - kh + 1) * (w - kw + 1), c * kh * kw)


def _col2im(gcols, x_shape, kh, kw):
    n, c, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    g6 = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + oh, j:j + ow] += g6[:, :, i, j]
    return gx


def maxpool2d(x, k):
    """Non-overlapping k x k max pooling; window must divide the extent.

    Ties route to the lowest linear index inside the window (first
    occurrence in row-major order), keeping the routing deterministic.
    """
    x = _wrap(x)
    idx = maxpool2d_indices(x.data, k)
    return pool_take(x, idx, k)


def maxpool2d_indices(data, k):
    """Argmax position (window-local flat index) of each k x k window."""
    if data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N,C,H,W), got shape {data.shape}")
    n, c, h, w = data.shape
    if h % k or w % k:
        raise ShapeError(f"pool window {k} does not divide spatial extent ({h}, {w})")
    windows = _pool_windows(data, k)
    return windows.argmax(axis=-1)


def pool_take(x, idx, k):
    """Gather one entry per k x k window at precomputed window-local indices."""
    x = _wrap(x)
    windows = _pool_windows(x.data, k)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def rule(out, g, vals, aux):
        _require_fast(g, "pool_take")
        idx_, k_, in_shape = aux
        gw = np.zeros(in_shape[:2] + (in_shape[2] // k_, in_shape[3] // k_, k_ * k_))
        np.put_along_axis(gw, idx_[..., None], g[..., None], axis=-1)
        return (_unpool_windows(gw, k_, in_shape),)

    return _make(data, "pool_take", (x,), (idx, k, x.shape), rule)


def _pool_windows(data, k):
    n, c, h, w = data.shape
    return np.ascontiguousarray(
        data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // k, w // k, k * k)


def _unpool_windows(gw, k, in_shape):
    n, c, h, w = in_shape
    return gw.reshape(n, c, h // k, w // k, k, k).transpose(
        0, 1, 2, 4, 3, 5).reshape(in_shape)


def _broadcast_op(fn, a, b, opname):
    return _broadcast_op_raw(fn, a.data, b.data, a.shape, b.shape, opname)


def _broadcast_op_raw(fn, av, bv, sa, sb, opname):
    try:
        return fn(av, bv)
    except ValueError:
        raise ShapeError(f"{opname} shapes do not broadcast: {sa} vs {sb}") from None


# ---------------------------------------------------------------------------
# backward passes


def _toposort(root):
    """Tensors reachable from root through tracked nodes, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            stack.append((p, False))
    return order


def _run_backward(loss, wrt, graph_mode):
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward expects a gradient-tracked loss")

    order = _toposort(loss)
    seed = np.ones(loss.shape)
    grads = {id(loss): Tensor(seed) if graph_mode else seed}
    keep = {id(t): t for t in wrt} if wrt is not None else None
    leaf_grads = {}

    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node.op == "leaf":
            leaf_grads[id(t)] = (t, g)
            continue
        vals = node.parents if graph_mode else tuple(p.data for p in node.parents)
        out_val = t if graph_mode else t.data
        parent_grads = node.rule(out_val, g, vals, node.aux)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or p.node is None:
                continue
            pid = id(p)
            grads[pid] = pg if pid not in grads else grads[pid] + pg

    if wrt is None:
        result = {t: _as_grad(g, graph_mode) for t, g in leaf_grads.values()}
    else:
        result = {}
        for t in wrt:
            if id(t) in leaf_grads:
                result[t] = _as_grad(leaf_grads[id(t)][1], graph_mode)
            else:
                zero = np.zeros(t.shape)
                result[t] = Tensor(zero, track=True) if graph_mode else Tensor(zero)
    return result


def _as_grad(g, graph_mode):
    if graph_mode:
        return g if isinstance(g, Tensor) else Tensor(g)
    return Tensor(g) if not isinstance(g, Tensor) else g


def backward(loss, wrt=None):
    """Total derivatives of a scalar tracked loss.

    Returns a map from leaf tensor to its gradient tensor. With ``wrt``
    given, the map covers exactly those tensors (zeros when unreachable);
    otherwise it covers every reachable leaf. Also stores each gradient on
    the leaf's ``grad`` attribute for optimizer convenience.
    """
    result = _run_backward(loss, wrt, graph_mode=False)
    for t, g in result.items():
        t.grad = g.data if t.grad is None else t.grad + g.data
    return result


def backward_as_graph(loss, wrt):
    """Like ``backward`` but the returned gradients are themselves tracked.

    Supported only for op paths whose backward rules are expressed in
    primitives (dense / relu / softmax chains); convolution and pooling
    paths raise ``UnsupportedOpError``. A second ``backward`` through the
    returned tensors is valid, which is what double backpropagation needs.
    """
    return _run_backward(loss, wrt, graph_mode=True)
