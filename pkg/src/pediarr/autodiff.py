"""Minimal dense-tensor reverse-mode differentiation on top of numpy.

Only the operators the fusion model and its losses need are provided.  Every
op builds a graph node when any input requires a gradient; ``backward`` walks
the nodes in reverse topological order and accumulates ``.grad`` on leaves.

Broadcasting is deliberately narrow: operands of elementwise ops must have
equal shapes, or one of them must be a scalar, or one shape must be a suffix
of the other (bias add).  Anything else raises ``ShapeError``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Tape:
    """Topologically ordered record of the nodes that feed a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; deep residual graphs overflow the recursion limit
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``leaves`` is given, returns their gradients in order (zeros for
    leaves the loss does not depend on).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        tape = Tape.from_loss(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if leaves is None:
        return None
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _bcast(a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast(a.data, b.data)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast(a.data, b.data)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _bcast(a.data, b.data)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def matmul(a, b) -> Tensor:
    """``a @ b``; ``b`` may be a 2-D weight applied over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    pos = x.data >= 0
    ez = np.exp(-np.abs(x.data))
    s = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
                t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat shapes differ off-axis: {[t.shape for t in xs]}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bw, "mean")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, ``mask / (1 - p)`` in train mode."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def l2norm(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    n = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    guarded = n <= eps
    denom = np.where(guarded, eps, n)
    y = x.data / denom

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(guarded, g / eps, (g - y * proj) / denom)
        return (gx,)

    return _node(y, (x,), bw, "l2norm")


def cosine_sim(a, b, axis: int = -1) -> Tensor:
    return tsum(mul(l2norm(a, axis), l2norm(b, axis)), axis=axis)


# ---------------------------------------------------------------------------
# convolutional / normalization layers


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: [B, C_in, T], w: [C_out, C_in, K], b: [C_out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d shapes {x.shape} * {w.shape}")
    bsz, cin, t = x.shape
    cout, _, k = w.shape
    tp = t + 2 * padding
    if tp < k:
        raise ShapeError(f"conv1d input length {t} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # [B, Cin, Tout, K]
    tout = cols.shape[2]
    out = np.tensordot(cols, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # [B, Tout, Cin, K]
            gxp = np.zeros((bsz, cin, tp))
            span = stride * (tout - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + t] if padding else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _node(out, parents, bw, "conv1d")


def maxpool1d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    bsz, c, t = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    tout = out.shape[2]

    def bw(g):
        gxp = np.zeros(xp.shape)
        span = stride * (tout - 1) + 1
        for j in range(kernel):
            gxp[:, :, j:j + span:stride] += np.where(idx == j, g, 0.0)
        return (gxp[:, :, padding:padding + t],)

    return _node(out, (x,), bw, "maxpool1d")


def adaptive_avgpool1d(x, output_size: int = 1) -> Tensor:
    x = as_tensor(x)
    t = x.shape[-1]
    bins = [(int(np.floor(i * t / output_size)), int(np.ceil((i + 1) * t / output_size)))
            for i in range(output_size)]
    out = np.stack([x.data[..., s:e].mean(axis=-1) for s, e in bins], axis=-1)

    def bw(g):
        gx = np.zeros(x.shape)
        for i, (s, e) in enumerate(bins):
            gx[..., s:e] += g[..., i:i + 1] / (e - s)
        return (gx,)

    return _node(out, (x,), bw, "adaptive_avgpool1d")


def _norm_backward(g_hat, xhat, invstd, axes, n):
    return invstd / n * (n * g_hat - g_hat.sum(axis=axes, keepdims=True)
                         - xhat * (g_hat * xhat).sum(axis=axes, keepdims=True))


def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch norm over [B, C] or [B, C, T]; running stats are updated in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm1d input {x.shape} vs {gamma.shape[0]} features")
    axes = (0,) if x.ndim == 2 else (0, 2)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1)
    n = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(-1)
    else:
        mu = running_mean.reshape(view)
        var = running_var.reshape(view)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    gview = gamma.data.reshape(view)
    out = gview * xhat + beta.data.reshape(view)

    def bw(g):
        g_hat = g * gview
        if training:
            gx = _norm_backward(g_hat, xhat, invstd, axes, n)
        else:
            gx = g_hat * invstd
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), bw, "batchnorm1d")


def layernorm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optional affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * invstd
    if gamma is None:
        return _node(xhat, (x,), lambda g: (_norm_backward(g, xhat, invstd, -1, d),), "layernorm")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        return (_norm_backward(g * gamma.data, xhat, invstd, -1, d),
                (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layernorm")


def scaled_dot_attention(q, k, v, dropout_p: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over [..., L, d] inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(q.shape[-1]))
    attn = dropout(softmax(scores, axis=-1), dropout_p, training, rng)
    return matmul(attn, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# generic dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "conv1d": conv1d,
    "maxpool1d": maxpool1d, "adaptive_avgpool1d": adaptive_avgpool1d,
    "batchnorm1d": batchnorm1d, "layernorm": layernorm, "relu": relu, "gelu": gelu,
    "sigmoid": sigmoid, "softmax": softmax, "log": log, "exp": exp, "concat": concat,
    "reshape": reshape, "transpose": transpose, "mean": mean, "sum": tsum,
    "dropout": dropout, "l2norm": l2norm, "cosine_sim": cosine_sim,
    "scaled_dot_attention": scaled_dot_attention, "power": power,
}


def forward(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unsupported op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    h: float
    tol: float
    attempts: int = 1

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_text(self) -> str:
        lines = [f"pass={str(self.passed).lower()}", f"h={self.h:g}", f"tol={self.tol:g}",
                 f"attempts={self.attempts}", f"max_rel_error={self.worst:.3e}"]
        lines += [f"param {k} {v:.3e}" for k, v in self.max_rel_error.items()]
        return "\n".join(lines) + "\n"


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
              h: float = 1e-4, tol: float = 1e-4, max_entries: int | None = None,
              retries: int = 0, offset: float = 1e-3, seed: int = 0,
              analytic: Callable[[], list[np.ndarray]] | None = None) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic (fix any dropout rng inside it).  With
    ``max_entries`` only a random subset of each tensor is probed.  If the
    check fails and ``retries`` > 0, every parameter is nudged by a random
    offset and the check is repeated, which steps off ReLU/max-pool kinks
    without hiding a wrong derivative.  ``analytic`` overrides the backprop
    gradients (used to test the detector itself).
    """
    named = dict(params) if isinstance(params, dict) else {
        (p.name or f"p{i}"): p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    report = None
    for attempt in range(retries + 1):
        if attempt:
            for p in named.values():
                p.data = p.data + offset * rng.standard_normal(p.shape)
        for p in named.values():
            p.grad = None
        if analytic is None:
            grads = backward(f(), list(named.values()))
        else:
            grads = analytic()
        errors = {}
        for (name, p), ga in zip(named.items(), grads):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                worst = max(worst, float(rel_error(ga.reshape(-1)[i], num)))
            errors[name] = worst
        report = GradCheckReport(errors, all(e <= tol for e in errors.values()), h, tol, attempt + 1)
        if report.passed:
            break
    return report
