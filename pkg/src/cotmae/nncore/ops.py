"""The closed op set: forward rules paired with hand-written backward rules.

Every op returns a new ``Tensor`` whose backward closure accumulates into the
parents, so arbitrary compositions of these ops are differentiable end to
end.  Elementwise ops broadcast like numpy; matmul broadcasts its leading
(batch) axes.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, grad_enabled, unbroadcast

IGNORE_INDEX = -1

_GELU_C = math.sqrt(2.0 / math.pi)


class MaskingError(ValueError):
    """Raised when a loss is requested over zero masked positions."""


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents, backward) -> Tensor:
    req = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents, backward=backward if req else None)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(orig))

    return _make(out_data, (a,), backward)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    split = a.shape[axis]
    out_data = np.concatenate([a.data, b.data], axis=axis)

    def backward(g):
        sl_a = [slice(None)] * g.ndim
        sl_a[axis] = slice(0, split)
        sl_b = [slice(None)] * g.ndim
        sl_b[axis] = slice(split, None)
        if a.requires_grad:
            a.accumulate_grad(g[tuple(sl_a)])
        if b.requires_grad:
            b.accumulate_grad(g[tuple(sl_b)])

    return _make(out_data, (a, b), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


def embedding_lookup(table: Parameter | Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer id array of any shape."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"id out of range for table with {table.shape[0]} rows")
    out_data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(full)

    return _make(out_data, (table,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance, then affine."""
    d = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            # Standard layer-norm backward, population variance.
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv_std)

    return _make(out_data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU in the tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
            x.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * d_inner))

    return _make(out_data, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return mul(x, Tensor(mask))


def masked_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over positions whose label is not IGNORE.

    ``logits`` is [n, vocab]; ``labels`` is a length-n integer sequence where
    IGNORE_INDEX marks positions that contribute nothing to value or gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"masked_cross_entropy expects [n, vocab] logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != (logits.shape[0],):
        raise ShapeError(f"labels length {lab.shape} does not match logits rows {logits.shape[0]}")
    valid = lab != IGNORE_INDEX
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise MaskingError("no masked positions")

    rows = logits.data[valid]
    targets = lab[valid]
    shifted = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n_valid), targets]
    out_data = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - lse[:, None])
            p[np.arange(n_valid), targets] -= 1.0
            full = np.zeros_like(logits.data)
            full[valid] = p * (g / n_valid)
            logits.accumulate_grad(full)

    return _make(out_data, (logits,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (mostly a test helper)."""
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _make(out_data, (x,), backward)
