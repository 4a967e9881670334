"""Dense float64 tensors with a small reverse-mode tape.

Only the primitives the adaptation pipeline needs are provided. Every op
records a node holding the closure that maps the output gradient to the
parent gradients; :meth:`Tensor.backward` orders those nodes into a
:class:`Tape` and replays it in reverse.
"""

from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvariantError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording inside the block (inference, frozen-feature extraction)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Node:
    __slots__ = ("name", "parents", "backward", "consumed")

    def __init__(self, name, parents, backward):
        self.name = name
        self.parents = parents
        self.backward = backward
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "flags", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.flags = {}
        self.name = name

    # -- introspection -------------------------------------------------
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
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ConfigurationError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            raise InvariantError("backward() on a tensor that does not require grad")
        Tape.record_from(self).run(self, grad)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic sugar ----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ConfigurationError("tensor / tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


class Tape:
    """Topologically ordered record of the ops that produced a root tensor."""

    def __init__(self, entries):
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    @classmethod
    def record_from(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node.consumed:
                raise InvariantError(
                    f"backward through {t._node.name!r} a second time; run the forward pass again"
                )
            stack.append((t, True))
            for p in t._node.parents:
                if p.requires_grad and p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, root, seed):
        grads = {id(root): seed}
        leaves = {}
        for t in reversed(self.entries):
            g = grads.pop(id(t), None)
            node = t._node
            if g is None:
                node.consumed = True
                node.backward = None
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    if id(p) in leaves:
                        leaves[id(p)][1] += pg
                    else:
                        leaves[id(p)] = [p, np.array(pg, dtype=np.float64)]
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            node.consumed = True
            node.backward = None
        if root._node is None:
            leaves[id(root)] = [root, seed]
        for leaf, g in leaves.values():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def make_op(data, parents, backward, name):
    """Wrap ``data`` as the output of an op; record it if any parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(name, tuple(parents), backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- structural / elementwise helpers ------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def tsum(a, axis=None):
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_op(a.data.sum(axis=axis), (a,), back, "sum")


def tmean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def getitem(a, idx):
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        if _has_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return make_op(a.data[idx], (a,), back, "getitem")


def _has_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return make_op(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
        "stack",
    )


def clamp_min(a, lo=0.0):
    """max(a, lo). The gradient passes where a >= lo, so a value sitting exactly
    on the bound (e.g. a zero-initialized decoder output) still trains."""
    keep = a.data >= lo
    return make_op(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# -- network primitives ----------------------------------------------------


def conv2d(x, weight, bias, stride=1, pad=0):
    """Cross-correlation with zero padding. x: (N,C,H,W), weight: (K,C,kh,kw), bias: (K,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if bias.shape != (k,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({k},)")
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(gm @ wmat, n, c, h, w, kh, kw, stride, pad)
        return gx, gw, gb

    return make_op(out, (x, weight, bias), back, "conv2d")


def linear(x, weight, bias):
    """x @ weight + bias with x: (N,D), weight: (D,E), bias: (E,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def back(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return make_op(xd @ wd + bias.data, (x, weight, bias), back, "linear")


def leaky_relu(x, slope=0.01):
    """max(x, slope*x); at exactly 0 the negative-side slope is used for the gradient."""
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError(f"slope must be in [0, 1), got {slope}")
    x = as_tensor(x)
    pos = x.data > 0
    d = np.where(pos, 1.0, slope)
    return make_op(np.where(pos, x.data, slope * x.data), (x,), lambda g: (g * d,), "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def softmax_cross_entropy(logits, labels, ignore_index=255):
    """Mean pixel cross-entropy over non-ignored labels.

    logits: (N,C,H,W) tensor, labels: (N,H,W) integer array. When every pixel
    is ignored the loss is 0 with zero gradient and ``flags['all_ignored']``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ConfigurationError(f"logits {logits.shape} and labels {labels.shape} disagree")
    ncls = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= ncls))
    if bad.any():
        raise ConfigurationError(f"labels outside [0, {ncls}) and != ignore_index {ignore_index}")
    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(se)
    if count == 0:
        out = make_op(np.array(0.0), (logits,), lambda g: (np.zeros_like(z),), "cross_entropy")
        out.flags["all_ignored"] = True
        return out
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def back(g):
        p = ez / se
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / count),)

    return make_op(np.array(loss), (logits,), back, "cross_entropy")


def mse(a, b):
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        gd = (2.0 * g / n) * diff
        return gd, -gd

    return make_op(np.array((diff * diff).sum() / n), (a, b), back, "mse")


@lru_cache(maxsize=128)
def _interp_matrix(n_in, n_out):
    """Rows of align_corners=False linear interpolation weights, (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation (align_corners=False) over the last two axes."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_op(x.data.copy(), (x,), lambda g: (g,), "resize")
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return make_op(out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),), "resize")


NORM_EPS = 1e-12


def unit_normalize(x, eps=NORM_EPS):
    """Divide each row of (N, D) by its L2 norm.

    Rows with norm <= eps pass through unchanged; their indices are listed in
    ``flags['degenerate_rows']``.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ConfigurationError(f"unit_normalize expects (N, D), got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    bad = norm[:, 0] <= eps
    safe = np.where(bad[:, None], 1.0, norm)
    y = x.data / safe

    def back(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * proj) / safe
        gx[bad] = g[bad]
        return (gx,)

    out = make_op(y, (x,), back, "unit_normalize")
    if bad.any():
        out.flags["degenerate_rows"] = np.flatnonzero(bad)
    return out
