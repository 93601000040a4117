"""Small reverse-mode autodiff over numpy arrays.

Every op returns a new immutable :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  Graphs are built
fresh for each forward pass and discarded after :func:`backward`.

Layout conventions: images are NHWC, conv kernels are (kh, kw, cin, cout).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()

DTYPE = np.float32


class AutodiffError(Exception):
    pass


class ZeroNormError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class GraphError(AutodiffError, RuntimeError):
    pass


class Tensor:
    """Immutable array node in a compute graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.node_id = next(_node_ids)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward_fn, op="custom"):
        """Build a node from a forward value and ``backward_fn(g) -> tuple of parent grads``."""
        return cls(data, dtype=np.asarray(data).dtype, _parents=parents, _backward=backward_fn, op=op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"expected a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not a supported op")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DTYPE


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor.from_op(out.astype(x.dtype), (x,), backward, "gelu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes strictly inside, zero at or beyond the bounds."""
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return Tensor.from_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# --- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def patchify(x: Tensor, patch: int) -> Tensor:
    """(N, H, W, C) -> (N, (H/p)*(W/p), p*p*C) non-overlapping patches, row-major."""
    n, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    out = x.data.reshape(n, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * gw, patch * patch * c)

    def backward(g):
        return (g.reshape(n, gh, gw, patch, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, "patchify")


# --- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, m): flatten leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
        return Tensor.from_op(out, (a, b), backward_flat, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC cross-correlation with kernel (kh, kw, cin, cout)."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    wdat = w.data

    def window(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    # im2col: (N*Ho*Wo, kh*kw*C) columns ordered (i, j, c) to match the kernel layout
    cols = np.concatenate([xp[window(i, j)] for i in range(kh) for j in range(kw)], axis=-1).reshape(-1, kh * kw * c)
    w2 = wdat.reshape(kh * kw * c, cout)
    out = (cols @ w2).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gcols = (g2 @ w2.T).reshape(n, ho, wo, kh * kw, c)
        gxp = np.zeros_like(xp)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            gxp[window(i, j)] += gcols[..., idx, :]
        gx = gxp[:, padding : padding + h, padding : padding + wd, :] if padding else gxp
        return gx, (cols.T @ g2).reshape(wdat.shape)

    return Tensor.from_op(out, (x, w), backward, "conv2d")


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear resampling of NHWC ``x``: out[n] = rows[n] @ x[n] @ cols[n]^T per channel.

    ``rows`` is (N|1, Ho, H) and ``cols`` is (N|1, Wo, W); both are constants.
    """
    n, h, w, c = x.shape
    rows = np.broadcast_to(np.asarray(rows, dtype=x.dtype), (n,) + np.shape(rows)[-2:])
    cols = np.broadcast_to(np.asarray(cols, dtype=x.dtype), (n,) + np.shape(cols)[-2:])
    if rows.shape[2] != h or cols.shape[2] != w:
        raise ShapeError("resample matrices do not match input size")
    ho, wo = rows.shape[1], cols.shape[1]
    t = (rows @ x.data.reshape(n, h, w * c)).reshape(n, ho, w, c)
    out = cols[:, None] @ t

    def backward(g):
        gt = cols.transpose(0, 2, 1)[:, None] @ g
        return ((rows.transpose(0, 2, 1) @ gt.reshape(n, ho, w * c)).reshape(n, h, w, c),)

    return Tensor.from_op(out, (x,), backward, "resample")


def bilinear_matrix(n_in: int, n_out: int, start: float = 0.0, stop: float | None = None, dtype=np.float64):
    """Interpolation weights sampling ``n_out`` points corner-aligned over [start, stop] in source pixel coords.

    A single output sample takes the midpoint of the interval.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError("bilinear sizes must be positive")
    stop = n_in - 1 if stop is None else stop
    coords = np.array([(start + stop) / 2.0]) if n_out == 1 else np.linspace(start, stop, n_out)
    coords = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[1] == h and x.shape[2] == w:
        return x
    return resample(x, bilinear_matrix(x.shape[1], h)[None], bilinear_matrix(x.shape[2], w)[None])


# --- normalization / attention helpers --------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, beta.shape)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax of 2-D ``logits``."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects (batch, classes) logits")
    targets = np.asarray(targets, dtype=int)
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = ld.shape[0]
    loss = -logp[np.arange(n), targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=ld.dtype), (logits,), backward, "cross_entropy")


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    vd = v.data
    norm = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ZeroNormError("cannot normalize a zero-norm vector")
    u = vd / norm

    def backward(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor.from_op(u, (v,), backward, "l2_normalize")


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine along ``axis``; rank-1 inputs give a scalar."""
    u, v = _pair(u, v)
    if u.shape[axis] != v.shape[axis]:
        raise ShapeError(f"cosine_similarity length mismatch {u.shape} vs {v.shape}")
    return tsum(mul(l2_normalize(u, axis), l2_normalize(v, axis)), axis)


# --- backward ----------------------------------------------------------------


class GradientMap(dict):
    """node_id -> gradient array; also indexable by the Tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. every node that requires grad."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output does not depend on any tensor with requires_grad")
    grads = {output.node_id: np.ones_like(output.data)}
    for node in reversed(_topo(output)):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at node {k}")
    return GradientMap(grads)


# --- finite-difference check ---------------------------------------------------


@dataclass
class CheckReport:
    max_rel_err: list[float]
    tol: float
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)


def numeric_grad(fn: Callable[..., Tensor], arrays: list[np.ndarray], index: int, h: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        flat[k] = orig - h
        fm = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, tol: float = 1e-3, h: float = 1e-3) -> CheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences, all in float64.

    Error per input is normwise: max|analytic - numeric| / max(max|analytic|, max|numeric|).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    grads = backward(out) if out.requires_grad else GradientMap()
    errs, failures = [], []
    for i, leaf in enumerate(leaves):
        analytic = grads[leaf] if leaf in grads else np.zeros_like(arrays[i])
        numeric = numeric_grad(fn, arrays, i, h)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic - numeric).max(initial=0.0)
        err = 0.0 if diff == 0 else diff / max(scale, 1e-12)
        errs.append(float(err))
        if err > tol:
            failures.append(i)
    return CheckReport(errs, tol, failures)
