"""Dense tensors with reverse-mode differentiation.

Only the primitives needed by the keyword CNN and its losses are provided:
valid 2-D convolution, disjoint max pooling, affine maps, ReLU, dropout,
softmax, a floored log and a handful of elementwise helpers. Every primitive
accepts an optional leading batch axis so that several windows can share one
graph.

Precision is global: 32-bit for training, 64-bit for gradient checks::

    with precision("float64"):
        x = Tensor(np.random.rand(3), requires_grad=True)
        (0.5 * (x * x)).sum().backward()
"""

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()

LOG_FLOOR = 1e-12


def _get(name, default):
    return getattr(_state, name, default)


def get_dtype():
    return _get("dtype", np.float32)


def set_precision(name):
    """Set the global floating point precision ("float32" or "float64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name):
    old = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = old


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording the graph (inference fast path)."""
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class FloorCounter:
    """Counts how often the log floor was hit since the last reset."""

    def __init__(self):
        self.hits = 0

    def reset(self):
        hits, self.hits = self.hits, 0
        return hits


log_floor_hits = FloorCounter()


class Tensor:
    """An n-d array node in a differentiation graph.

    ``grad`` is filled by :func:`backward` and always has the shape of
    ``data``. Tensors are treated as immutable apart from ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self):
        return backward(self)

    # elementwise arithmetic: same shape or python scalar only
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out, op):
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by {op}")
    return out


def _make(out, parents, backward_fn, op):
    out = _finite(out, op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(out, op=op)


# ----------------------------------------------------------------------------
# elementwise helpers
# ----------------------------------------------------------------------------


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same(a, b, "add")
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return _make(a.data + b, (a,), lambda g: (g,), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    return _make(a.data * b, (a,), lambda g: (g * b,), "mul")


def power(a, exponent):
    if not np.isscalar(exponent):
        raise ContractError("power: exponent must be a scalar")
    return _make(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "pow",
    )


def exp(a):
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor=LOG_FLOOR):
    """Natural log of ``max(a, floor)``; floored entries get zero gradient."""
    clipped = a.data < floor
    if clipped.any():
        log_floor_hits.hits += int(clipped.sum())
    safe = np.where(clipped, floor, a.data)
    return _make(np.log(safe), (a,), lambda g: (np.where(clipped, 0.0, g / safe),), "log")


def relu(a):
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def tsum(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "index")


def stack(tensors):
    """Stack equally-shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack: empty input")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors])
    return _make(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


# ----------------------------------------------------------------------------
# network primitives
# ----------------------------------------------------------------------------


def _batched(x, core_ndim, op):
    if x.ndim == core_ndim:
        return True
    if x.ndim == core_ndim + 1:
        return False
    raise DimensionError(f"{op}: expected {core_ndim} or {core_ndim + 1} axes, got shape {x.shape}")


def conv2d(x, kernels, bias, stride=(1, 1)):
    """Valid (unpadded) 2-D cross-correlation.

    Args:
        x: input of shape ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        kernels: ``[C_out, C_in, kh, kw]``.
        bias: ``[C_out]``.
        stride: ``(sh, sw)``, both >= 1.

    Returns:
        Tensor of shape ``[(N,) C_out, H', W']`` with
        ``H' = (H - kh) // sh + 1`` and likewise for ``W'``.
    """
    single = _batched(x, 3, "conv2d")
    xd = x.data[None] if single else x.data
    sh, sw = (stride, stride) if np.isscalar(stride) else tuple(stride)
    if sh < 1 or sw < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must have 4 axes, got shape {kernels.shape}")
    n, c_in, h, w = xd.shape
    c_out, k_cin, kh, kw = kernels.shape
    if k_cin != c_in:
        raise DimensionError(f"conv2d: input channels {c_in} != kernel channels {k_cin} (axis 1)")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} larger than input {(h, w)} on axes (H, W)")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1

    # im2col in channel-major order: cols[c, i, j, n, y, x]
    xt = xd.transpose(1, 0, 2, 3)
    cols = np.empty((c_in, kh, kw, n, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    cols = cols.reshape(c_in * kh * kw, n * ho * wo)
    kmat = kernels.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, n, ho, wo) + bias.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def bw(g):
        gd = g[None] if single else g
        gt = np.ascontiguousarray(gd.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        dk = (gt @ cols.T).reshape(kernels.shape)
        db = gt.sum(axis=1)
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ gt).reshape(c_in, kh, kw, n, ho, wo)
            dxt = np.zeros((c_in, n, h, w), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
            dx = dxt.transpose(1, 0, 2, 3)
            if single:
                dx = dx[0]
        return dx, dk, db

    return _make(out, (x, kernels, bias), bw, "conv2d")


def max_pool2d(x, window):
    """Max over disjoint ``(ph, pw)`` windows; ties route to the lowest flat index."""
    single = _batched(x, 3, "max_pool2d")
    xd = x.data[None] if single else x.data
    ph, pw = window
    n, c, h, w = xd.shape
    if h % ph or w % pw:
        raise DimensionError(f"max_pool2d: window {(ph, pw)} does not divide input {(h, w)}")
    ho, wo = h // ph, w // pw
    blocks = xd.reshape(n, c, ho, ph, wo, pw)
    # pairwise maxima are far faster than a multi-axis reduction here
    out = np.array(blocks[:, :, :, 0, :, 0])
    for i in range(ph):
        for j in range(pw):
            if i or j:
                np.maximum(out, blocks[:, :, :, i, :, j], out=out)
    peak = out
    if single:
        out = out[0]

    def bw(g):
        gd = g[None] if single else g
        gb = np.zeros((n, c, ho, ph, wo, pw), dtype=xd.dtype)
        taken = np.zeros((n, c, ho, wo), dtype=bool)
        for i in range(ph):
            for j in range(pw):
                hit = (blocks[:, :, :, i, :, j] == peak) & ~taken
                gb[:, :, :, i, :, j] = np.where(hit, gd, 0)
                taken |= hit
        dx = gb.reshape(n, c, h, w)
        return (dx[0] if single else dx,)

    return _make(out, (x,), bw, "max_pool2d")


def affine(x, weights, bias):
    """``out[j] = sum_i weights[j, i] * x[i] + bias[j]`` for ``x`` of shape [n] or [N, n]."""
    single = _batched(x, 1, "affine")
    if weights.ndim != 2 or weights.shape[1] != x.shape[-1]:
        raise DimensionError(f"affine: weights {weights.shape} incompatible with input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"affine: bias {bias.shape} != ({weights.shape[0]},)")
    out = x.data @ weights.data.T + bias.data

    def bw(g):
        if single:
            return g @ weights.data, np.outer(g, x.data), g
        return g @ weights.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weights, bias), bw, "affine")


def dropout(x, mask, rate):
    """Inverted dropout: ``x * mask / (1 - rate)`` with a caller-drawn 0/1 mask."""
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: mask {mask.shape} != input {x.shape}")
    scale = np.asarray(mask, dtype=x.data.dtype) / (1.0 - rate)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def softmax(z):
    """Softmax over the last axis with max subtraction."""
    if z.shape[-1] < 2:
        raise DimensionError(f"softmax: need at least 2 classes, got {z.shape[-1]}")
    if np.isnan(z.data).any():
        raise NumericError("softmax: NaN logits")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (z,), bw, "softmax")


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, wrt=None):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Args:
        root: scalar tensor.
        wrt: optional list of leaves. Their gradients are returned in order;
            leaves the root does not depend on get zeros.

    Returns:
        List of gradient arrays for ``wrt`` (empty list when not given).
    """
    if root.data.size != 1 or root.ndim != 0:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return []
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def grad_check(f, x, eps=1e-4, coords=None):
    """Max relative error between analytic and central-difference gradients.

    The error of one coordinate is ``|analytic - numeric| / max(1, |analytic|)``.

    Args:
        f: function mapping a Tensor to a scalar Tensor.
        x: point at which to check (its data is not modified).
        eps: central-difference step.
        coords: optional iterable of flat indices to check (all by default).
    """
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    flat_idx = range(base.size) if coords is None else coords
    worst = 0.0
    for k in flat_idx:
        plus = base.copy()
        plus.flat[k] += eps
        minus = base.copy()
        minus.flat[k] -= eps
        with no_grad():
            numeric = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * eps)
        a = float(analytic.flat[k])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
