"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap row-major numpy arrays.  Every operation records its parents
and a closure that pushes the incoming gradient back to them; `backward`
walks the graph once in reverse topological order, so each node's gradient
is accumulated exactly once per call.  Training runs in float32; gradient
checks construct float64 tensors for the extra headroom.

There is no implicit broadcasting: binary elementwise ops require equal
shapes, and the only "batching" is the explicit per-relation stacking done
by callers.  Bias addition and masked row reductions are their own ops with
hand-derived backward rules.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-9  # clamp inside cross_entropy_rows

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an operation receives incompatible operand shapes."""


class MaskError(ValueError):
    """Raised when a mask leaves no admissible entry (for example a fully
    masked softmax row)."""


class GraphError(RuntimeError):
    """Raised on invalid graph use, such as backward from a non-scalar."""


class no_grad:
    """Context manager that builds value-only tensors (no graph recording)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 op: str = ""):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar (0-d results decay to these): keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- elementwise arithmetic (same shape, or python scalar) ------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("add", self, other)
            out = Tensor(self.data + other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         parents=(self, other), op="add")
            if out.requires_grad:
                a, b = self, other

                def _bw(g):
                    if a.requires_grad:
                        a._accum(g)
                    if b.requires_grad:
                        b._accum(g)
                out._backward = _bw
            return out
        out = Tensor(self.data + other, requires_grad=self.requires_grad,
                     parents=(self,), op="add")
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accum(g)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, requires_grad=self.requires_grad,
                     parents=(self,), op="neg")
        if out.requires_grad:
            a = self
            out._backward = lambda g: a._accum(-g)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("sub", self, other)
            out = Tensor(self.data - other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         parents=(self, other), op="sub")
            if out.requires_grad:
                a, b = self, other

                def _bw(g):
                    if a.requires_grad:
                        a._accum(g)
                    if b.requires_grad:
                        b._accum(-g)
                out._backward = _bw
            return out
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("mul", self, other)
            out = Tensor(self.data * other.data,
                         requires_grad=self.requires_grad or other.requires_grad,
                         parents=(self, other), op="mul")
            if out.requires_grad:
                a, b = self, other

                def _bw(g):
                    if a.requires_grad:
                        a._accum(g * b.data)
                    if b.requires_grad:
                        b._accum(g * a.data)
                out._backward = _bw
            return out
        out = Tensor(self.data * other, requires_grad=self.requires_grad,
                     parents=(self,), op="mul")
        if out.requires_grad:
            a = self
            c = other
            out._backward = lambda g: a._accum(g * c)
        return out

    __rmul__ = __mul__


def tensor(data, dtype: str | np.dtype = np.float32, requires_grad: bool = False) -> Tensor:
    """Construct a leaf tensor from array-like data."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def constant(data, dtype: str | np.dtype = np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=False)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with deterministic accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.data.shape} and {b.data.shape} disagree")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 parents=(a, b), op="matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: operand must be 2-D, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T), requires_grad=a.requires_grad,
                 parents=(a,), op="transpose")
    if out.requires_grad:
        out._backward = lambda g: a._accum(g.T)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad,
                 parents=(a,), op="relu")
    if out.requires_grad:
        keep = a.data > 0

        def _bw(g):
            a._accum(g * keep)
        out._backward = _bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype),
                 requires_grad=a.requires_grad, parents=(a,), op="sum")
    if out.requires_grad:
        def _bw(g):
            a._accum(np.full_like(a.data, g))
        out._backward = _bw
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by integer index (repeats allowed); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: operand must be 2-D, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx], requires_grad=a.requires_grad, parents=(a,), op="gather_rows")
    if out.requires_grad:
        def _bw(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accum(acc)
        out._backward = _bw
    return out


def gather_cols(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_cols: operand must be 2-D, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise IndexError(f"gather_cols: index out of range for {a.data.shape[1]} columns")
    out = Tensor(np.ascontiguousarray(a.data[:, idx]), requires_grad=a.requires_grad,
                 parents=(a,), op="gather_cols")
    if out.requires_grad:
        def _bw(g):
            acc = np.zeros_like(a.data.T)
            np.add.at(acc, idx, g.T)
            a._accum(acc.T)
        out._backward = _bw
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: operand must be 2-D, got {a.data.shape}")
    out = Tensor(a.data[:, start:stop], requires_grad=a.requires_grad,
                 parents=(a,), op="slice_cols")
    if out.requires_grad:
        def _bw(g):
            acc = np.zeros_like(a.data)
            acc[:, start:stop] = g
            a._accum(acc)
        out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: need at least one operand")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError("concat_cols: operands must be 2-D with equal row counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 requires_grad=any(p.requires_grad for p in parts),
                 parents=tuple(parts), op="concat_cols")
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

        def _bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p._accum(g[:, lo:hi])
        out._backward = _bw
    return out


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an m-by-n matrix."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(f"add_bias: got matrix {a.data.shape} and bias {bias.data.shape}")
    out = Tensor(a.data + bias.data, requires_grad=a.requires_grad or bias.requires_grad,
                 parents=(a, bias), op="add_bias")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(g)
            if bias.requires_grad:
                bias._accum(g.sum(axis=0))
        out._backward = _bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by elementwise gain and bias."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm: operand must be 2-D, got {a.data.shape}")
    n = a.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data,
                 requires_grad=a.requires_grad or gain.requires_grad or bias.requires_grad,
                 parents=(a, gain, bias), op="layer_norm")
    if out.requires_grad:
        def _bw(g):
            if gain.requires_grad:
                gain._accum((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias._accum(g.sum(axis=0))
            if a.requires_grad:
                gx = g * gain.data
                # d/dx of (x - mu) * inv, standard layer-norm backward
                s1 = gx.sum(axis=1, keepdims=True)
                s2 = (gx * xhat).sum(axis=1, keepdims=True)
                a._accum(inv * (gx - s1 / n - xhat * s2 / n))
        out._backward = _bw
    return out


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with optional boolean keep-mask.

    Masked positions get probability exactly zero; the max-shift uses only
    unmasked entries.  A row with no unmasked entry is an error.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: operand must be 2-D, got {a.data.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.data.shape:
            raise ShapeError(f"softmax_rows: mask shape {mask.shape} != data shape {a.data.shape}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise MaskError(f"softmax_rows: row {bad} is fully masked")
        x = np.where(mask, a.data, np.asarray(-np.inf, dtype=a.data.dtype))
    else:
        x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, np.asarray(0.0, dtype=e.dtype))
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p.astype(a.data.dtype, copy=False), requires_grad=a.requires_grad,
                 parents=(a,), op="softmax_rows")
    if out.requires_grad:
        def _bw(g):
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accum(p * (g - dot))
        out._backward = _bw
    return out


def cross_entropy_rows(probs: Tensor, target, row_mask=None) -> Tensor:
    """Mean over unmasked rows of -sum(target * log(probs)).

    `target` and `row_mask` are plain data (no gradient flows into them).
    Probabilities are clamped at PROB_FLOOR before the log; the clamp's
    subgradient is zero below the floor.  With every row masked the loss is
    exactly zero.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target,
                   dtype=probs.data.dtype)
    if probs.data.shape != t.shape:
        raise ShapeError(f"cross_entropy_rows: probs {probs.data.shape} vs target {t.shape}")
    r = probs.data.shape[0]
    if row_mask is None:
        rmask = np.ones(r, dtype=bool)
    else:
        rmask = np.asarray(row_mask, dtype=bool)
        if rmask.shape != (r,):
            raise ShapeError(f"cross_entropy_rows: row_mask shape {rmask.shape} != ({r},)")
    n_active = int(rmask.sum())
    clamped = np.maximum(probs.data, PROB_FLOOR)
    if n_active == 0:
        value = np.asarray(0.0, dtype=probs.data.dtype)
    else:
        row_losses = -(t * np.log(clamped)).sum(axis=1)
        value = np.asarray(row_losses[rmask].sum() / n_active, dtype=probs.data.dtype)
    out = Tensor(value, requires_grad=probs.requires_grad, parents=(probs,), op="cross_entropy_rows")
    if out.requires_grad:
        def _bw(g):
            if n_active == 0:
                probs._accum(np.zeros_like(probs.data))
                return
            d = np.where(probs.data >= PROB_FLOOR, -t / clamped, 0.0)
            d[~rmask] = 0.0
            probs._accum((g / n_active) * d.astype(probs.data.dtype, copy=False))
        out._backward = _bw
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Single-head scaled dot-product attention.

    Scores are q k^T / sqrt(d); `key_mask` (length = number of keys) removes
    keys from every query's softmax.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention: q, k, v must be 2-D")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"attention: q width {q.data.shape} vs k width {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"attention: k rows {k.data.shape} vs v rows {v.data.shape}")
    scale = 1.0 / math.sqrt(q.data.shape[1])
    scores = matmul(q, transpose(k)) * scale
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (k.data.shape[0],):
            raise ShapeError(f"attention: key_mask shape {key_mask.shape} != ({k.data.shape[0]},)")
        full = np.broadcast_to(key_mask, scores.data.shape)
        probs = softmax_rows(scores, mask=full)
    else:
        probs = softmax_rows(scores)
    return matmul(probs, v)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Split columns into equal heads, attend per head, concatenate."""
    d = q.data.shape[1]
    if d % num_heads != 0:
        raise ShapeError(f"multi_head_attention: width {d} not divisible by {num_heads} heads")
    if k.data.shape[1] != d or v.data.shape[1] != d:
        raise ShapeError("multi_head_attention: q, k, v widths must match")
    dh = d // num_heads
    outs = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        outs.append(attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi),
                              slice_cols(v, lo, hi), key_mask=key_mask))
    return outs[0] if num_heads == 1 else concat_cols(outs)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every tensor on a path to the loss and
    returns {leaf: grad} for leaf tensors that require gradients (keyed by
    identity).  Calling again on the same graph adds on top of existing
    grads; zero first for a fresh result.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss._accum(np.ones_like(loss.data))
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not node._parents and node.requires_grad:
            leaves[node] = node.grad
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-5, denom_floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds the scalar loss from `params` on every call.  Each
    parameter coordinate is displaced by +/-eps in place.  Only meaningful
    for f continuous at the evaluation point; use float64 parameters.
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            an = float(ag.reshape(-1)[i])
            rel = abs(an - num) / max(abs(an), abs(num), denom_floor)
            if rel > worst:
                worst = rel
    return worst


def truncated_normal(rng: np.random.Generator, shape: tuple, sigma: float = 0.02,
                     dtype: str | np.dtype = np.float32) -> np.ndarray:
    """Normal draws clipped to +/-2 sigma, the usual cheap truncation."""
    return np.clip(rng.normal(0.0, sigma, size=shape), -2 * sigma, 2 * sigma).astype(dtype)
