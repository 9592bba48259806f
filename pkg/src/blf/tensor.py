"""Dense tensors with reverse-mode automatic differentiation.

Arrays are plain numpy ndarrays (float32 for training, float64 for oracles
and gradient checks). Every differentiable op records a closure that
accumulates into its parents' ``grad`` buffers; ``Tensor.backward`` replays
them in reverse topological order. Ops keep a global multiply-add counter so
tests can assert asymptotic cost without timing anything.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, RangeError, ShapeError, UsageError

MAX_RANK = 4

# Large finite score used to mask attention logits. exp(-1e9) underflows to
# exactly 0.0 in both float32 and float64, so masked positions contribute
# nothing, without the NaN hazards of -inf.
NEG_INF = -1e9

_work = 0


def reset_work() -> None:
    global _work
    _work = 0


def work() -> int:
    """Multiply-add count accumulated since the last reset."""
    return _work


def _add_work(n: int) -> None:
    global _work
    _work += int(n)


def _as_array(x, dtype) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim > MAX_RANK:
        raise ShapeError(f"rank {a.ndim} exceeds supported maximum {MAX_RANK}")
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return a if a.ndim == 0 else np.ascontiguousarray(a)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=np.float32, requires_grad=False):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph."""
        return Tensor(self.data, dtype=self.data.dtype)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Accumulate d(self)/d(p) into every reachable parameter's grad.

        Only defined for scalar outputs (losses).
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate grads are not part of the contract; free them
        for node in topo:
            if node is not self and node._backward is not None:
                node.grad = None

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable tensor; grad is allocated up front and kept zeroed."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=np.float32):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    grads_needed = any(p.requires_grad for p in parents)
    out.requires_grad = grads_needed
    out._parents = tuple(p for p in parents if p.requires_grad) if grads_needed else ()
    out._backward = backward if grads_needed else None
    return out


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data + b.data
    _add_work(data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data * b.data
    _add_work(data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if not isinstance(b, Tensor):
        b = _wrap(b, a)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)
    _add_work(data.size // data.shape[-1] * a.shape[-1] * data.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.ascontiguousarray(x.data.reshape(shape))

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _make(data, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _make(data, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx)

    return _make(data, (x,), backward)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """np.take along one axis with an arbitrary integer index array.

    The gradient scatter-adds back, so repeated indices are handled.
    """
    indices = np.asarray(indices)
    data = np.take(x.data, indices, axis=axis)
    _add_work(data.size)

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        g_moved = np.moveaxis(
            g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim))
        )
        np.add.at(moved, indices, g_moved)
        x._accumulate(gx)

    return _make(data, (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise RangeError(
            f"embedding ids outside [0, {weight.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    data = weight.data[ids]
    _add_work(data.size)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        weight._accumulate(gw)

    return _make(data, (weight,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with a constant."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    _add_work(data.size)

    def backward(g):
        x._accumulate(np.where(mask, 0.0, g))

    return _make(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max subtraction)."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    _add_work(3 * data.size)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate((g - inner) * data)

    return _make(data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    x3 = x.data * x.data * x.data
    u = c * (x.data + 0.044715 * x3)
    t = np.tanh(u)
    data = (0.5 * x.data * (1.0 + t)).astype(x.dtype)
    _add_work(6 * data.size)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data * x.data)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        x._accumulate(g * dx)

    return _make(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1] if x.data.ndim else 0
    if n == 0:
        raise ShapeError("layer_norm over a zero-length axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    data = (xhat * gain.data + bias.data).astype(x.dtype)
    _add_work(6 * data.size)

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = ivar * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x._accumulate(dx)

    return _make(data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale
    _add_work(data.size)

    def backward(g):
        x._accumulate(g * keep * scale)

    return _make(data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    _add_work(x.size)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g.reshape(()), x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_label: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_label.

    logits: [N, V]; targets: [N] integer ids. All positions ignored -> 0 with
    zero gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    keep = targets != ignore_label
    kept_targets = targets[keep]
    if kept_targets.size and (kept_targets.min() < 0 or kept_targets.max() >= v):
        raise ShapeError(f"target ids outside vocab range [0, {v})")
    count = int(keep.sum())
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    _add_work(3 * logits.size)
    if count == 0:
        data = np.zeros((), dtype=logits.dtype)

        def backward_empty(g):
            logits._accumulate(np.zeros_like(logits.data))

        return _make(data, (logits,), backward_empty)

    log_probs = (logits.data - m) - np.log(z)
    nll = -log_probs[np.arange(n), targets * keep]
    data = np.asarray((nll * keep).sum() / count, dtype=logits.dtype)

    def backward(g):
        probs = e / z
        probs[np.arange(n)[keep], targets[keep]] -= 1.0
        probs[~keep] = 0.0
        logits._accumulate(probs * (float(g) / count))

    return _make(data, (logits,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray, ignore_mask: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy with logits over non-ignored positions.

    labels in {0, 1}; ignore_mask True marks positions excluded from the mean.
    """
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    if ignore_mask is None:
        keep = np.ones(logits.shape, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != logits.shape:
            raise ShapeError(f"ignore_mask shape {ignore_mask.shape} != logits shape {logits.shape}")
        keep = ~ignore_mask
    count = int(keep.sum())
    z = logits.data
    _add_work(4 * logits.size)
    if count == 0:
        data = np.zeros((), dtype=logits.dtype)

        def backward_empty(g):
            logits._accumulate(np.zeros_like(logits.data))

        return _make(data, (logits,), backward_empty)

    per = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray((per * keep).sum() / count, dtype=logits.dtype)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        logits._accumulate((sig - labels) * keep * (float(g) / count))

    return _make(data, (logits,), backward)
