"""Reverse-mode automatic differentiation over numpy arrays.

The graph is built dynamically as ops run, swept once in reverse
topological order by ``Tensor.backward``, and freed afterwards.
Gradients accumulate by summation into leaf tensors, so a parameter
used in several places receives the sum of all its contributions.

Only 1-D and 2-D float tensors are supported; that is all the rest of
the package needs. Every op checks its output for non-finite values
and raises ``NumericsError`` immediately, which keeps failures close
to their cause.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateError,
    DimensionError,
    NumericsError,
)

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the ``with`` block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim not in (1, 2):
            raise DimensionError(f"tensors must be 1-D or 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError("tensors must have at least one element per axis")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Run the reverse sweep from this scalar and free the graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if self._freed:
            raise ContractError("backward() on a freed graph; recompute the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True


class Parameter(Tensor):
    """A named leaf tensor that optimizers update in place.

    ``trainable`` gates gradient flow: a frozen parameter participates
    in the forward pass but accumulates no gradient.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _check_tensor(x, label: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractError(f"{label} must be a Tensor, got {type(x).__name__}")
    return x


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed tensor dtypes in one op: {sorted(map(str, dtypes))}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericsError("operation produced a non-finite value")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._freed = False
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul needs 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused matrix product plus bias row: ``x @ w + b``."""
    _check_tensor(x, "x")
    _check_tensor(w, "w")
    _check_tensor(b, "b")
    _check_same_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("affine needs 2-D input and weight and a 1-D bias")
    if x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data
    out += b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(out, (x, w, b), backward)


def transpose(a: Tensor) -> Tensor:
    _check_tensor(a, "a")
    if a.data.ndim != 2:
        raise DimensionError("transpose needs a 2-D tensor")
    out = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _result(out, (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also broadcasts a 1-D bias across matrix rows."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
        return _result(a.data + b.data, (a, b), backward)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward(g):
            return g, g.sum(axis=0)
        return _result(a.data + b.data, (a, b), backward)
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def backward(g):
        return g, -g

    return _result(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    _check_tensor(a, "a")

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    _check_tensor(a, "a")
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    _check_tensor(a, "a")
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    _check_tensor(a, "a")
    if (a.data <= 0).any():
        raise NumericsError("log of a non-positive value")

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is zero on the clamped side."""
    _check_tensor(a, "a")
    floor = float(floor)
    mask = a.data > floor

    def backward(g):
        return (g * mask,)

    return _result(np.maximum(a.data, floor), (a,), backward)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Smooth GELU activation (tanh form)."""
    _check_tensor(a, "a")
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_K * x * (1.0 + _GELU_C * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _result(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    _check_tensor(a, "a")
    if a.data.ndim != 2:
        raise DimensionError("softmax_rows needs a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a 2-D tensor with learned gain and bias."""
    _check_tensor(x, "x")
    _check_tensor(gain, "gain")
    _check_tensor(bias, "bias")
    _check_same_dtype(x, gain, bias)
    if x.data.ndim != 2:
        raise DimensionError("layer_norm needs a 2-D input")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), backward)


def embed(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer positions ``ids``."""
    _check_tensor(table, "table")
    if table.data.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    idx = np.asarray(ids)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("ids must be a 1-D integer array")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"id out of range for table with {n} rows")
    out = table.data[idx].copy()

    def backward(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, idx, g)
        return (dtable,)

    return _result(out, (table,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along rows; 1-D inputs become single rows."""
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    parts = [_check_tensor(p, "part") for p in parts]
    _check_same_dtype(*parts)
    ndims = {p.data.ndim for p in parts}
    if ndims == {1}:
        widths = {p.shape[0] for p in parts}
        if len(widths) > 1:
            raise DimensionError("concat_rows vector lengths differ")
        out = np.stack([p.data for p in parts], axis=0)

        def backward(g):
            return tuple(g[i] for i in range(len(parts)))

        return _result(out, parts, backward)
    if ndims == {2}:
        widths = {p.shape[1] for p in parts}
        if len(widths) > 1:
            raise DimensionError("concat_rows column counts differ")
        out = np.concatenate([p.data for p in parts], axis=0)
        sizes = [p.shape[0] for p in parts]
        bounds = np.cumsum([0] + sizes)

        def backward(g):
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return _result(out, parts, backward)
    raise DimensionError("concat_rows inputs must be all 1-D or all 2-D")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a 2-D tensor, giving a 1-D vector."""
    _check_tensor(a, "a")
    if a.data.ndim != 2:
        raise DimensionError("mean_rows needs a 2-D tensor")
    n = a.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(a.data.mean(axis=0), (a,), backward)


def row_sums(a: Tensor) -> Tensor:
    """Sum over columns of a 2-D tensor, one value per row."""
    _check_tensor(a, "a")
    if a.data.ndim != 2:
        raise DimensionError("row_sums needs a 2-D tensor")

    def backward(g):
        return (np.broadcast_to(g[:, None], a.shape).copy(),)

    return _result(a.data.sum(axis=1), (a,), backward)


def diag_part(a: Tensor) -> Tensor:
    """Main diagonal of a square 2-D tensor."""
    _check_tensor(a, "a")
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diag_part needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        d = np.zeros_like(a.data)
        d[np.arange(n), np.arange(n)] = g
        return (d,)

    return _result(a.data.diagonal().copy(), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a shape-(1,) tensor."""
    _check_tensor(a, "a")

    def backward(g):
        return (np.full_like(a.data, g.reshape(-1)[0]),)

    return _result(a.data.sum(dtype=a.data.dtype).reshape(1), (a,), backward)


def unit(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale a 1-D vector to unit L2 norm."""
    _check_tensor(a, "a")
    if a.data.ndim != 1:
        raise DimensionError("unit needs a 1-D tensor")
    norm = float(np.linalg.norm(a.data))
    if norm < eps:
        raise DegenerateError("cannot normalize a zero vector")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g @ out)) / norm,)

    return _result(out, (a,), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm."""
    _check_tensor(a, "a")
    if a.data.ndim != 2:
        raise DimensionError("l2_normalize_rows needs a 2-D tensor")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if (norms < eps).any():
        raise DegenerateError("cannot normalize a zero row")
    out = a.data / norms

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return _result(out, (a,), backward)


def cosine(u: Tensor, v: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two 1-D vectors, as a shape-(1,) tensor."""
    _check_tensor(u, "u")
    _check_tensor(v, "v")
    _check_same_dtype(u, v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine needs same-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu < eps or nv < eps:
        raise DegenerateError("cosine of a zero vector is undefined")
    c = float(u.data @ v.data) / (nu * nv)

    def backward(g):
        gs = g.reshape(-1)[0]
        du = (v.data / (nu * nv) - c * u.data / (nu * nu)) * gs
        dv = (u.data / (nu * nv) - c * v.data / (nv * nv)) * gs
        return du.astype(u.data.dtype), dv.astype(v.data.dtype)

    out = np.asarray([c], dtype=u.data.dtype)
    return _result(out, (u, v), backward)


IGNORE_INDEX = -100


def cross_entropy_mean(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmaxes.

    Rows whose target equals ``ignore_index`` contribute nothing to the
    loss and are excluded from the denominator.
    """
    _check_tensor(logits, "logits")
    if logits.data.ndim != 2:
        raise DimensionError("cross_entropy_mean needs 2-D logits")
    tgt = np.asarray(targets)
    if tgt.ndim != 1 or not np.issubdtype(tgt.dtype, np.integer):
        raise ContractError("targets must be a 1-D integer array")
    n, vocab = logits.shape
    if tgt.shape[0] != n:
        raise DimensionError(f"targets length {tgt.shape[0]} does not match {n} logit rows")
    valid = tgt != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateError("cross_entropy_mean over a fully ignored batch")
    checked = tgt[valid]
    if checked.min() < 0 or checked.max() >= vocab:
        raise IndexError(f"target id out of range for vocab {vocab}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), np.where(valid, tgt, 0)]
    losses = (logsumexp - picked) * valid
    mean = losses.sum() / n_valid

    def backward(g):
        gs = g.reshape(-1)[0]
        probs = np.exp(shifted - logsumexp[:, None])
        probs[np.arange(n), np.where(valid, tgt, 0)] -= 1.0
        probs *= (valid[:, None] * (gs / n_valid))
        return (probs.astype(logits.data.dtype),)

    out = np.asarray([mean], dtype=logits.data.dtype)
    return _result(out, (logits,), backward)


_MASK_VALUE = -1e9


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` feature slices.

    ``q`` has shape (nq, d); ``k`` and ``v`` share shape (nk, d). With
    ``causal`` set, query row i only attends to key rows 0..i, enforced
    with an additive mask large enough that the masked weights underflow
    to exactly zero.
    """
    _check_tensor(q, "q")
    _check_tensor(k, "k")
    _check_tensor(v, "v")
    _check_same_dtype(q, k, v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention inputs must be 2-D")
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape != (nk, d) or v.shape != (nk, d):
        raise DimensionError("attention key/value shapes must match and agree with queries")
    if n_heads < 1 or d % n_heads != 0:
        raise DimensionError(f"feature size {d} is not divisible by {n_heads} heads")
    if causal and nq != nk:
        raise DimensionError("causal attention needs equal query and key counts")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)

    qh = q.data.reshape(nq, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nk, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, n_heads, dh).transpose(1, 0, 2)

    scores = qh @ kh.transpose(0, 2, 1) * sc
    if causal:
        mask = np.triu(np.full((nq, nk), _MASK_VALUE, dtype=scores.dtype), k=1)
        scores = scores + mask
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=2, keepdims=True)
    oh = w @ vh
    out = oh.transpose(1, 0, 2).reshape(nq, d)

    def backward(g):
        goh = g.reshape(nq, n_heads, dh).transpose(1, 0, 2)
        dvh = w.transpose(0, 2, 1) @ goh
        dw = goh @ vh.transpose(0, 2, 1)
        ds = w * (dw - (dw * w).sum(axis=2, keepdims=True))
        dqh = ds @ kh * sc
        dkh = ds.transpose(0, 2, 1) @ qh * sc
        dq = dqh.transpose(1, 0, 2).reshape(nq, d)
        dk = dkh.transpose(1, 0, 2).reshape(nk, d)
        dv = dvh.transpose(1, 0, 2).reshape(nk, d)
        return dq, dk, dv

    return _result(out, (q, k, v), backward)


def finite_diff_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the checked parameters on every
    call and return a scalar tensor; ``params`` is one Parameter or a
    sequence of them. Returns the largest relative error over all
    parameter elements, where the error is normalized by
    max(|analytic|, |numeric|, 1e-8). Run this with float64 parameters;
    float32 rounding swamps the signal otherwise.
    """
    if isinstance(params, Parameter):
        params = [params]
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(gflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
