"""Minimal tape-based reverse-mode differentiation on top of numpy.

Every op creates a new :class:`Tensor` that remembers its parents and a
closure computing the parents' adjoints. Creation order is recorded with a
monotone counter, so sorting the reachable nodes by that counter gives a
valid execution order and its reverse a valid adjoint order.

Binary elementwise ops accept equal shapes, or one operand holding a single
element. Anything else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CLAMP_BAND = 1e-6

_counter = itertools.count()
_state = threading.local()


def _get_state():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
    return _state


def default_dtype():
    return _get_state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    st = _get_state()
    old = st.dtype
    st.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad():
    st = _get_state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled():
    return _get_state().grad_enabled


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "nonfinite")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype.kind == "f" else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self.op = "leaf"
        self.nonfinite = False

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{g})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward_fn, op, check_finite=False):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_counter)
    out.op = op
    parents = tuple(parents)
    nonfinite = any(p.nonfinite for p in parents)
    if check_finite and not nonfinite:
        nonfinite = not bool(np.isfinite(data).all())
    out.nonfinite = nonfinite
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b, opname):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g, shape, size):
    """Fold an adjoint back onto an operand that was used as a scalar."""
    if g.shape == shape:
        return g
    if size == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape, a.size), _reduce_to(g, b.shape, b.size)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape, a.size), _reduce_to(-g, b.shape, b.size)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape, a.size), _reduce_to(g * a.data, b.shape, b.size)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * out / b.data
        return _reduce_to(ga, a.shape, a.size), _reduce_to(gb, b.shape, b.size)

    return _make(out, (a, b), bw, "div", check_finite=True)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tabs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp", check_finite=True)


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make(out, (a,), bw, "log", check_finite=True)


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def power(a, p):
    """Raise to a fixed scalar exponent."""
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p).astype(a.dtype, copy=False)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * np.power(a.data, p - 1.0),)

    return _make(out, (a,), bw, "pow", check_finite=True)


def sqrt(a):
    return power(a, 0.5)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; the adjoint passes only inside the (slightly widened) band."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo - CLAMP_BAND
    if hi is not None:
        mask &= a.data <= hi + CLAMP_BAND
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    k = np.where(a.data >= 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b, "where")
    out = np.where(cond, a.data, b.data)
    if out.shape != cond.shape:
        raise ValueError(f"where: condition shape {cond.shape} vs result {out.shape}")

    def bw(g):
        return (_reduce_to(np.where(cond, g, 0), a.shape, a.size),
                _reduce_to(np.where(cond, 0, g), b.shape, b.size))

    return _make(out, (a, b), bw, "where")


# -- reductions and shape ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kshape), a.shape),)

    if axis is None and not keepdims:
        out = np.reshape(out, (1,))
    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in idx)


def getitem(a, idx):
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[idx])
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(a.shape),)

    return _make(out, (a,), bw, "broadcast_to")


def stack(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


def concat(tensors: Sequence, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw, "concat")


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a = as_tensor(a)
    b = as_tensor(b)
    if b.ndim != 2 or a.ndim < 2:
        raise ValueError(f"matmul: expected (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, axis -1 of {a.shape} vs axis 0 of {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        k, n = b.shape
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def _conv_raw(x, w, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def conv2d(x, w, bias=None, padding=0):
    """Stride-1 2-D cross-correlation with symmetric zero padding.

    ``x`` is (N, C, H, W), ``w`` is (O, C, k, k), ``bias`` is (O,).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: bad shapes input {x.shape}, kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel axis 1 differs, input {x.shape[1]} vs kernel {w.shape[1]}")
    k = w.shape[-1]
    if k > min(x.shape[2], x.shape[3]) + 2 * padding:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {x.shape[2:]}")
    if padding > k - 1:
        raise ValueError("conv2d: padding must be < kernel size")
    out, win = _conv_raw(x.data, w.data, padding)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        wf = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gx, _ = _conv_raw(g, wf, k - 1 - padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


# -- graph and backward ---------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from a root, in execution order."""

    nodes: list = field(default_factory=list)
    nonfinite: bool = False

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack_ = [root]
        while stack_:
            t = stack_.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack_.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes=nodes, nonfinite=root.nonfinite)

    def leaves(self):
        return [t for t in self.nodes if t._backward is None and t.requires_grad]


def backward(root: Tensor, graph: Graph | None = None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward: root must hold a single value, got shape {root.shape}")
    if graph is None:
        graph = Graph.from_root(root)
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return graph


def gradients(root: Tensor, inputs: Iterable[Tensor]):
    """Return d(root)/d(input) for each input; unreachable inputs get zeros."""
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    backward(root)
    out = [np.zeros(t.shape, dtype=t.dtype) if t.grad is None else t.grad for t in inputs]
    for t, s in zip(inputs, saved):
        t.grad = s
    return out


# -- finite-difference checking ------------------------------------------

@dataclass
class GradCheckEntry:
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list
    max_rel_error: float
    tol: float
    passed: bool
    nonfinite: list = field(default_factory=list)

    def summary(self):
        state = "pass" if self.passed else "FAIL"
        return f"{state}: max rel err {self.max_rel_error:.3e} over {len(self.entries)} coords (tol {self.tol:g})"


def grad_check(f: Callable[[Tensor], Tensor], x, eps=1e-3, tol=1e-3, n_coords=None,
               seed=0, floor=1e-8, numeric_dtype=np.float64, richardson=False,
               ladder=1) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The numeric side is evaluated in ``numeric_dtype`` so that a 32-bit
    analytic gradient is judged against a reference free of 32-bit roundoff.
    With ``richardson`` the differences at steps ``eps`` and ``eps/2`` are
    combined as ``(4 D(eps/2) - D(eps)) / 3``, cancelling the ``eps**2``
    truncation term. With ``ladder=k > 1`` the estimate is repeated at
    steps ``eps * 10**(-j/2)`` for ``j < k`` and the median is used, so a
    single step that straddles a kink of a piecewise-smooth function does
    not decide the outcome. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if ladder < 1:
        raise ValueError("ladder must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {y.shape}")
    (analytic,) = gradients(y, [xt])

    coords = list(np.ndindex(x0.shape))
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    xd = x0.astype(numeric_dtype)
    entries, bad = [], []
    worst = 0.0
    with no_grad(), precision(numeric_dtype):
        def central(idx, h):
            orig = xd[idx]
            xd[idx] = orig + h
            fp = float(f(Tensor(xd.copy())).data.reshape(-1)[0])
            xd[idx] = orig - h
            fm = float(f(Tensor(xd.copy())).data.reshape(-1)[0])
            xd[idx] = orig
            return (fp - fm) / (2 * h)

        def estimate(idx, h):
            d = central(idx, h)
            return (4.0 * central(idx, h / 2) - d) / 3.0 if richardson else d

        for idx in coords:
            num = float(np.median([estimate(idx, eps * 10 ** (-j / 2)) for j in range(ladder)]))
            ana = float(analytic[idx])
            if not (np.isfinite(num) and np.isfinite(ana)):
                bad.append(idx)
                entries.append(GradCheckEntry(idx, ana, num, float("inf")))
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            entries.append(GradCheckEntry(idx, ana, num, rel))
    passed = not bad and worst <= tol
    return GradCheckReport(entries, worst, tol, passed, bad)
