"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure.  Nodes carry a
monotonically increasing sequence number, so the set of ancestors of a loss
sorted by descending sequence number is the tape replayed in reverse
execution order.

Only two broadcasting forms are allowed: adding a bias over the leading axes
(``x[..., n] + b[n]``) and multiplying by a Python scalar.  Anything else with
mismatched shapes raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import warnings

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "masked_mean",
    "sum_all",
    "cross_entropy_label_smoothed",
]

_seq = itertools.count()
_grad_enabled = True
DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor, grad=None) -> None:
    """Propagate gradients from ``loss`` to every ancestor that requires grad.

    Leaf gradients accumulate across calls; intermediate nodes hold the
    gradient of the latest call only.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_bias(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    bias = _check_bias(a, b, "add")

    def bw(g):
        return g, (_sum_to_bias(g) if bias else g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    bias = _check_bias(a, b, "sub")

    def bw(g):
        return g, -(_sum_to_bias(g) if bias else g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias(a, b, "mul")

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        return ga, (_sum_to_bias(gb) if bias else gb)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ------------------------------------------------------------------ linear alg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` may be 2-D (shared weight applied over the leading axes of ``a``) or
    have exactly the same leading axes as ``a`` (batched product).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for a weight stored ``[out, in]``; one graph node instead of three."""
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    return _make(out, (x, w) if b is None else (x, w, b), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs >= 2 axes, got {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def _index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw)


def take_rows(x: Tensor, rows) -> Tensor:
    """``x[rows]`` along the first axis (gradient scattered back with add.at)."""
    rows = np.asarray(rows)
    return _index(x, rows)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}")
    return take_rows(table, ids)


# -------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis=-1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of ``x[b, t, :]`` over positions where ``mask[b, t]`` is true -> [B, d]."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("masked_mean: empty span")
    w = mask / counts
    out = np.einsum("bt,btd->bd", w, x.data)
    return _make(out, (x,), lambda g: (w[:, :, None] * g[:, None, :],))


# ---------------------------------------------------------------------- losses


def cross_entropy_label_smoothed(logits: Tensor, targets, smoothing=0.0, pad_id=None,
                                 reduction="mean") -> Tensor:
    """Soft-target cross-entropy averaged over non-pad positions.

    The target distribution puts ``1 - smoothing`` on the gold id and spreads
    ``smoothing`` uniformly over all ``|V|`` classes.  ``logits`` is ``[..., V]``
    and ``targets`` has the leading shape.  With ``reduction="sum"`` the
    per-token losses are summed instead.  If every target is padding the loss
    is 0 and a ``RuntimeWarning`` is emitted.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise IndexError("cross_entropy: target id out of range")
    valid = np.ones(tgt.shape, dtype=bool) if pad_id is None else tgt != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy: all targets are padding; loss defined as 0", RuntimeWarning)
        return _make(np.asarray(0.0, dtype=flat.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))

    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full(flat.shape, smoothing / V, dtype=flat.dtype)
    q[np.arange(len(tgt)), tgt] += 1.0 - smoothing
    q *= valid[:, None]
    per_tok = -(q * logp).sum(axis=1)
    denom = float(n_valid) if reduction == "mean" else 1.0
    loss = per_tok.sum() / denom

    def bw(g):
        # d/dlogits of -sum q log softmax = p * sum(q) - q
        p = np.exp(logp)
        gl = (p * q.sum(axis=1, keepdims=True) - q) * (g / denom)
        return (gl.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=flat.dtype), (logits,), bw)


def numeric_gradient(f, x: np.ndarray, step=1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor=1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) -- the floor absorbs O(h^2) noise on tiny gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def isfinite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))
