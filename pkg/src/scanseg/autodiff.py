"""Reverse-mode differentiation over the tensor primitive set.

The tape is implicit: every differentiable operation returns a :class:`Var`
whose ``vjp`` closure knows how to push a cotangent back to its parents. The
graph is a DAG ordered by creation; :func:`backward` walks it once in reverse
topological order, accumulating gradients additively at fan-out points, and
returns a fresh gradient map without mutating any node (so running it twice
gives identical results).

Operations accept either :class:`Var` or plain ndarrays. They record a node
only when gradients are enabled and some input requires them; otherwise they
return a bare ndarray, which makes the same model code serve both training
and inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Var:
    """One tape node: a value plus the recipe for its parents' gradients."""

    __slots__ = ("data", "parents", "vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False):
        self.data = np.asarray(data)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Var):
    """A trainable leaf tensor; updated in place by the optimizer."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def value_of(x):
    """The plain ndarray behind a Var, or x itself."""
    return x.data if isinstance(x, Var) else x


def _tracking(*xs):
    return _GRAD_ENABLED and any(isinstance(x, Var) and x.requires_grad for x in xs)


def _req(x):
    return isinstance(x, Var) and x.requires_grad


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root):
    """Gradients of a scalar root w.r.t. every reachable leaf.

    Returns a dict mapping leaf Vars (nodes without a recorded vjp, i.e.
    parameters and explicit inputs) to ndarray gradients of the leaf's shape.
    """
    if not isinstance(root, Var):
        raise TypeError("backward expects a Var")
    if root.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    order = []
    seen = set()
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
            stack.append((p, False))

    grads = {id(root): np.ones((), dtype=root.data.dtype)}
    by_id = {id(root): root}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            leaves[node] = g
            continue
        for parent, gp in node.vjp(g):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + gp
            else:
                grads[pid] = gp
                by_id[pid] = parent
    return leaves


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a, b):
    out = value_of(a) + value_of(b)
    if not _tracking(a, b):
        return out

    def vjp(g):
        grads = []
        if _req(a):
            grads.append((a, _unbroadcast(g, a.data.shape)))
        if _req(b):
            grads.append((b, _unbroadcast(g, b.data.shape)))
        return grads

    return Var(out, tuple(x for x in (a, b) if _req(x)), vjp, True)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    ad, bd = value_of(a), value_of(b)
    out = ad * bd
    if not _tracking(a, b):
        return out

    def vjp(g):
        grads = []
        if _req(a):
            grads.append((a, _unbroadcast(g * bd, ad.shape)))
        if _req(b):
            grads.append((b, _unbroadcast(g * ad, bd.shape)))
        return grads

    return Var(out, tuple(x for x in (a, b) if _req(x)), vjp, True)


def div(a, b):
    ad, bd = value_of(a), value_of(b)
    out = ad / bd
    if not _tracking(a, b):
        return out

    def vjp(g):
        grads = []
        if _req(a):
            grads.append((a, _unbroadcast(g / bd, ad.shape)))
        if _req(b):
            grads.append((b, _unbroadcast(-g * ad / (bd * bd), bd.shape)))
        return grads

    return Var(out, tuple(x for x in (a, b) if _req(x)), vjp, True)


def _unary(x, out, dfun):
    if not _tracking(x):
        return out

    def vjp(g):
        return [(x, dfun(g))]

    return Var(out, (x,), vjp, True)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xd = value_of(x)
    return _unary(x, np.log(xd), lambda g: g / xd)


def sigmoid(x):
    out = T.sigmoid(value_of(x))
    return _unary(x, out, lambda g: g * out * (1 - out))


def silu(x):
    xd = value_of(x)
    s = T.sigmoid(xd)
    return _unary(x, xd * s, lambda g: g * (s * (1 + xd * (1 - s))))


def softplus(x):
    xd = value_of(x)
    return _unary(x, T.softplus(xd), lambda g: g * T.sigmoid(xd))


def relu(x):
    xd = value_of(x)
    return _unary(x, np.maximum(xd, 0), lambda g: g * (xd > 0))


def softmax(x, axis=-1):
    p = T.softmax(value_of(x), axis=axis)
    return _unary(x, p, lambda g: p * (g - (g * p).sum(axis=axis, keepdims=True)))


def log_softmax(x, axis=-1):
    xd = value_of(x)
    out = T.log_softmax(xd, axis=axis)
    p = np.exp(out)
    return _unary(x, out, lambda g: g - p * g.sum(axis=axis, keepdims=True))


def sum_(x, axis=None, keepdims=False):
    xd = value_of(x)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def dfun(g):
        if axis is None:
            return np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xd.shape).astype(xd.dtype, copy=True)

    return _unary(x, out, dfun)


def mean(x, axis=None, keepdims=False):
    xd = value_of(x)
    if axis is None:
        n = xd.size
    elif isinstance(axis, tuple):
        n = int(np.prod([xd.shape[a] for a in axis]))
    else:
        n = xd.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    xd = value_of(x)
    return _unary(x, xd.reshape(shape), lambda g: g.reshape(xd.shape))


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return _unary(x, np.ascontiguousarray(value_of(x).transpose(axes)),
                  lambda g: np.ascontiguousarray(g.transpose(inv)))


def expand_dims(x, axis):
    xd = value_of(x)
    return _unary(x, np.expand_dims(xd, axis), lambda g: g.reshape(xd.shape))


def flip(x, axis):
    return _unary(x, np.flip(value_of(x), axis).copy(),
                  lambda g: np.flip(g, axis).copy())


def concat(xs, axis):
    datas = [value_of(x) for x in xs]
    out = np.concatenate(datas, axis=axis)
    if not _tracking(*xs):
        return out
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if _req(x):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.append((x, np.ascontiguousarray(g[tuple(idx)])))
        return grads

    return Var(out, tuple(x for x in xs if _req(x)), vjp, True)


def index_axis1(x, t):
    """x[:, t] with a scatter adjoint; used by the per-step scan recurrence."""
    xd = value_of(x)

    def dfun(g):
        gx = np.zeros_like(xd)
        gx[:, t] = g
        return gx

    return _unary(x, np.ascontiguousarray(xd[:, t]), dfun)


def stack_last(xs):
    """Stack equal-shape values along a new trailing axis."""
    datas = [value_of(x) for x in xs]
    out = np.stack(datas, axis=-1)
    if not _tracking(*xs):
        return out

    def vjp(g):
        return [(x, np.ascontiguousarray(g[..., i]))
                for i, x in enumerate(xs) if _req(x)]

    return Var(out, tuple(x for x in xs if _req(x)), vjp, True)


def pad2d(x, top, bottom, left, right):
    """Zero-pad the two trailing axes of a (B, C, H, W) map."""
    xd = value_of(x)
    h, w = xd.shape[-2:]
    out = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return _unary(x, out, lambda g: np.ascontiguousarray(
        g[:, :, top:top + h, left:left + w]))


def slice2d(x, top, h, left, w):
    """Take a h x w window of the two trailing axes starting at (top, left)."""
    xd = value_of(x)

    def dfun(g):
        gx = np.zeros_like(xd)
        gx[:, :, top:top + h, left:left + w] = g
        return gx

    return _unary(x, np.ascontiguousarray(xd[:, :, top:top + h, left:left + w]), dfun)


def crop2d(x, h, w):
    """Keep the top-left h x w window of the two trailing axes."""
    return slice2d(x, 0, h, 0, w)


# ---------------------------------------------------------------------------
# neural primitives


def dense(x, w, b=None):
    xd, wd = value_of(x), value_of(w)
    out = T.dense(xd, wd, value_of(b) if b is not None else None)
    args = (x, w) if b is None else (x, w, b)
    if not _tracking(*args):
        return out

    def vjp(g):
        grads = []
        if _req(x):
            grads.append((x, g @ wd.T))
        if _req(w):
            grads.append((w, xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])))
        if b is not None and _req(b):
            grads.append((b, g.reshape(-1, wd.shape[1]).sum(axis=0)))
        return grads

    return Var(out, tuple(a for a in args if _req(a)), vjp, True)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    xd, wd = value_of(x), value_of(w)
    out = T.conv2d(xd, wd, value_of(b) if b is not None else None, stride, padding, groups)
    args = (x, w) if b is None else (x, w, b)
    if not _tracking(*args):
        return out

    def vjp(g):
        gx, gw, gb = T.conv2d_backward(xd, wd, g, stride, padding, groups,
                                       need_bias=b is not None and _req(b))
        grads = []
        if _req(x):
            grads.append((x, gx))
        if _req(w):
            grads.append((w, gw))
        if b is not None and _req(b):
            grads.append((b, gb))
        return grads

    return Var(out, tuple(a for a in args if _req(a)), vjp, True)


def conv1d_depthwise(x, k, reverse=False):
    xd, kd = value_of(x), value_of(k)
    out = T.conv1d_depthwise(xd, kd, reverse=reverse)
    if not _tracking(x, k):
        return out

    def vjp(g):
        if reverse:
            gx_r, gk = T.conv1d_depthwise_backward(xd[:, :, ::-1], kd, g[:, :, ::-1])
            gx = gx_r[:, :, ::-1].copy()
        else:
            gx, gk = T.conv1d_depthwise_backward(xd, kd, g)
        grads = []
        if _req(x):
            grads.append((x, gx))
        if _req(k):
            grads.append((k, gk))
        return grads

    return Var(out, tuple(a for a in (x, k) if _req(a)), vjp, True)


def bilinear_upsample2x(x):
    return _unary(x, T.bilinear_upsample2x(value_of(x)), T.bilinear_upsample2x_backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    xd, gd, bd = value_of(x), value_of(gamma), value_of(beta)
    out = T.layer_norm(xd, gd, bd, eps)
    if not _tracking(x, gamma, beta):
        return out
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def vjp(g):
        grads = []
        if _req(gamma):
            grads.append((gamma, (g * xhat).reshape(-1, gd.size).sum(axis=0)))
        if _req(beta):
            grads.append((beta, g.reshape(-1, gd.size).sum(axis=0)))
        if _req(x):
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            grads.append((x, gx))
        return grads

    return Var(out, tuple(a for a in (x, gamma, beta) if _req(a)), vjp, True)


def batch_norm2d_train(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm node.

    Returns (y, batch_mean, batch_var_unbiased); the statistics are plain
    ndarrays for the caller to fold into its running state.
    """
    xd, gd, bd = value_of(x), value_of(gamma), value_of(beta)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if n == 1:
        raise T.ShapeError("batch_norm2d training mode needs B*H*W > 1 per channel")
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    unbiased = var * (n / (n - 1))
    if not _tracking(x, gamma, beta):
        return out, mu, unbiased

    def vjp(g):
        grads = []
        if _req(gamma):
            grads.append((gamma, (g * xhat).sum(axis=(0, 2, 3))))
        if _req(beta):
            grads.append((beta, g.sum(axis=(0, 2, 3))))
        if _req(x):
            gh = g * gd[None, :, None, None]
            m1 = gh.mean(axis=(0, 2, 3))
            m2 = (gh * xhat).mean(axis=(0, 2, 3))
            gx = inv[None, :, None, None] * (
                gh - m1[None, :, None, None] - xhat * m2[None, :, None, None])
            grads.append((x, gx))
        return grads

    return Var(out, tuple(a for a in (x, gamma, beta) if _req(a)), vjp, True), mu, unbiased


def batch_norm2d_eval(x, running_mean, running_var, gamma, beta, eps=1e-5):
    """Eval-mode batch norm: a deterministic per-channel affine map."""
    rm, rv = value_of(running_mean), value_of(running_var)
    inv = 1.0 / np.sqrt(rv + eps)
    scale = mul(gamma, inv)
    y = mul(x, reshape(scale, (1, -1, 1, 1)))
    shift = sub(beta, mul(scale, rm))
    return add(y, reshape(shift, (1, -1, 1, 1)))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    passed: bool
    note: str = ""

    def __str__(self):
        lines = [f"{e.name}: max_abs={e.max_abs_err:.3e} max_rel={e.max_rel_err:.3e} "
                 f"{'ok' if e.passed else 'FAIL'}" for e in self.entries]
        lines.append(("PASS" if self.passed else "FAIL") + (f" ({self.note})" if self.note else ""))
        return "\n".join(lines)


def gradcheck(fn, params, step=1e-5, tol=1e-6):
    """Compare tape gradients of a scalar function against central differences.

    Args:
        fn: nullary callable returning a scalar Var; must be deterministic.
        params: dict name -> Parameter whose coordinates are perturbed.
        step: base finite-difference step, scaled per element by max(1, |x|).
        tol: max allowed relative error, denominator max(|a|, |b|, 1e-8).

    Returns:
        GradCheckReport with per-parameter worst-case errors.
    """
    root = fn()
    if not np.isfinite(root.data):
        return GradCheckReport([], False, note="non-finite forward value, check aborted")
    analytic = backward(root)
    entries = []
    ok = True
    for name, p in params.items():
        ga = analytic.get(p)
        if ga is None:
            ga = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        ga_flat = np.asarray(ga, dtype=np.float64).reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(entries, False,
                                       note=f"non-finite forward value near {name}[{i}]")
            gn = (f_plus - f_minus) / (2 * h)
            va = float(ga_flat[i])
            abs_err = abs(va - gn)
            rel_err = abs_err / max(abs(va), abs(gn), 1e-8)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
        passed = max_rel <= tol
        ok = ok and passed
        entries.append(GradCheckEntry(name, max_abs, max_rel, passed))
    return GradCheckReport(entries, ok)
