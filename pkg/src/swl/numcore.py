"""Small reverse-mode autodiff over numpy float64 arrays.

Every primitive records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the tape in reverse
topological order. The primitive set is deliberately closed: matmul,
add/mul/scale, transpose/reshape/slice/concat, softmax, GELU, layer norm,
transposed convolutions (1D/2D), sigmoid and binary cross entropy.
Everything else in the package is composed from these.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None, op="leaf", name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(op, data, parents, grad_fn):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    parents = tuple(parents)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    # exact Gaussian-CDF form
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make("gelu", x * cdf, (a,), grad_fn)


# --- linear algebra and shape ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # reported by _make instead
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), grad_fn)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def take(a, idx) -> Tensor:
    """Slice (basic or integer-array indexing)."""
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out, dtype=DTYPE), (a,), grad_fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no operands")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make("concat", np.concatenate([p.data for p in parts], axis=ax), parts, grad_fn)


# --- normalisation ---------------------------------------------------------


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), grad_fn)


LN_EPS = 1e-9


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Layer norm over the last axis with elementwise affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gg = g.sum(axis=lead)
        gw = (g * xhat).sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, gw, gg

    return _make("layer_norm", out, (x, gain, bias), grad_fn)


# --- transposed convolutions ----------------------------------------------


def _tap_index(n, stride, tap, pad, out_n, circular):
    """Output positions hit by kernel tap ``tap`` for inputs 0..n-1."""
    pos = stride * np.arange(n) + tap - pad
    if circular:
        return np.arange(n), pos % out_n
    keep = (pos >= 0) & (pos < out_n)
    return np.nonzero(keep)[0], pos[keep]


def _conv_t2d(op, x, w, b, stride, circular_w):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected x B×Ci×H×W and w Ci×Co×kh×kw, got {x.shape}, {w.shape}")
    B, ci, H, W = x.shape
    if w.shape[0] != ci or b.shape != (w.shape[1],):
        raise ShapeError(f"{op}: channel mismatch x{x.shape} w{w.shape} b{b.shape}")
    co, kh, kw = w.shape[1:]
    sh, sw = stride
    Ho, Wo = H * sh, W * sw
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    taps = []
    for a in range(kh):
        ii, rr = _tap_index(H, sh, a, ph, Ho, False)
        for c in range(kw):
            jj, cc = _tap_index(W, sw, c, pw, Wo, circular_w)
            if len(ii) and len(jj):
                taps.append((a, c, ii, rr, jj, cc))
    out = np.zeros((B, co, Ho, Wo), dtype=DTYPE)
    for a, c, ii, rr, jj, cc in taps:
        xs = x.data[:, :, ii][:, :, :, jj]
        out[:, :, rr[:, None], cc[None, :]] += np.einsum("bihw,io->bohw", xs, w.data[:, :, a, c])
    out += b.data[None, :, None, None]

    def grad_fn(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for a, c, ii, rr, jj, cc in taps:
            gs = g[:, :, rr[:, None], cc[None, :]]
            if gx is not None:
                gx[:, :, ii[:, None], jj[None, :]] += np.einsum("bohw,io->bihw", gs, w.data[:, :, a, c])
            if gw is not None:
                xs = x.data[:, :, ii][:, :, :, jj]
                gw[:, :, a, c] += np.einsum("bihw,bohw->io", xs, gs)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(op, out, (x, w, b), grad_fn)


def conv_transpose2d(x, w, b, stride=(2, 2), circular_w=True) -> Tensor:
    """Transposed 2D convolution producing exactly ``stride``× the input size.

    x is B×Ci×H×W, w is Ci×Co×kh×kw. Rows (latitude) are zero padded;
    columns (longitude) wrap around when ``circular_w``.
    """
    if isinstance(stride, int):
        stride = (stride, stride)
    return _conv_t2d("conv_transpose2d", x, w, b, stride, circular_w)


def conv_transpose1d(x, w, b, stride=2, circular=True) -> Tensor:
    """Transposed 1D convolution over the last axis; x B×Ci×L, w Ci×Co×k."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv_transpose1d: expected x B×Ci×L and w Ci×Co×k, got {x.shape}, {w.shape}")
    y = _conv_t2d("conv_transpose1d", reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2])),
                  reshape(w, (w.shape[0], w.shape[1], 1, w.shape[2])), b, (1, stride), circular)
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


# --- loss ------------------------------------------------------------------


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy of sigmoid(logits) against targets in [0, 1]."""
    z = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs targets {t.shape}")
    if t.size == 0:
        raise ShapeError("bce: empty input")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("bce: targets must lie in [0, 1]")
    zd = z.data
    loss = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    n = t.size

    def grad_fn(g):
        return (g * (_sigmoid(zd) - t) / n,)

    return _make("bce", np.array(loss.mean()), (z,), grad_fn)


# --- composed helpers ------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def total(x) -> Tensor:
    """Sum of all entries, composed from reshape and matmul."""
    x = as_tensor(x)
    flat = reshape(x, (1, x.data.size))
    return reshape(matmul(flat, np.ones((x.data.size, 1))), ())


# --- backward --------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss; returns {id(leaf): grad} for every reachable trainable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            leaves[id(node)] = g
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
    return leaves


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict:
    """Named gradients, zero for parameters the loss does not reach."""
    leaves = backward(loss)
    return {n: np.array(leaves.get(id(p), np.zeros_like(p.data)), dtype=DTYPE).reshape(p.shape)
            for n, p in params.items()}


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                      max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the loss from the current parameter values. With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed. Never raises on disagreement, it only reports.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = gradients(loss_fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + eps
                up = float(loss_fn().data)
                flat[k] = orig - eps
                down = float(loss_fn().data)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), 1e-12)
            worst = max(worst, err)
    return worst


# --- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]):
    """One bias-corrected Adam update, in place on ``params``."""
    if state.lr < 0:
        raise ValueError("lr must be non-negative")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} for parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"SWLCKPT v1\n"


def save_checkpoint(path, params: Mapping[str, object]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name, p in params.items():
            arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f8", order="C")
            if any(ch in name for ch in "\t\n"):
                raise ValueError(f"checkpoint: bad parameter name {name!r}")
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"{name}\t{shape}\n".encode())
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a SWLCKPT v1 file")
    pos = len(CKPT_MAGIC)
    out = {}
    while pos < len(raw):
        nl = raw.index(b"\n", pos)
        name, shape_s = raw[pos:nl].decode().split("\t")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        pos = nl + 1
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").astype(DTYPE).reshape(shape)
        pos += nbytes
    return out
