"""Tape-based reverse-mode autodiff over dense numpy arrays.

Covers exactly the op set needed to train a small draft transformer: matmul
(plus a batched 3-D variant for attention heads), broadcast add/multiply,
concatenate/narrow, layer normalization, SiLU, softmax, cross-entropy, mean
absolute distance, and constant-weighted reductions for loss masking.

Everything is float64. Ops record a backward closure only while gradients are
enabled (see `no_grad`) and at least one input requires them; a forward pass
through a frozen model therefore builds no graph and is safe to run from
several threads at once. Graph-recording passes are single-threaded per tape.
"""

from __future__ import annotations

from contextvars import ContextVar

import numpy as np

# Additive attention-mask value. exp(NEG_INF - rowmax) underflows to exactly
# 0.0 in float64, so masked positions contribute nothing to softmax sums.
NEG_INF = -1e30

_grad_enabled: ContextVar[bool] = ContextVar("specalign_grad_enabled", default=True)


class no_grad:
    """Context manager disabling graph recording (thread-safe via contextvars)."""

    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.reset(self._token)
        return False


class Tensor:
    """A dense float64 array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Populate `.grad` on every requires-grad tensor reachable from a scalar.

        Gradients accumulate (+=), so parameters keep sums across repeated
        backward calls until `zero_grad`.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A trainable leaf tensor. Gradient buffer always matches the data shape."""

    __slots__ = ("name",)

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def as_tensor(value) -> Tensor:
    """Wrap ndarrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands; use bmm for batched")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product a[B,m,k] @ b[B,k,n]."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inverse))

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


# ---------------------------------------------------------------------------
# Shape surgery
# ---------------------------------------------------------------------------


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                _accumulate(p, g[tuple(index)])
            offset += size

    return _make(data, tuple(parts), backward)


def narrow(a, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice of `size` entries along `axis`, starting at `start`."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _make(a.data[index].copy(), (a,), backward)


def gather_rows(table, ids) -> Tensor:
    """Row lookup table[ids] for integer id vectors (embedding gather)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    return _make(data, (table,), backward)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate the last axis by precomputed tables: x*cos + rot_half(x)*sin.

    rot_half([a, b]) = [-b, a] on the two halves of the last axis; cos/sin are
    constants broadcast over leading axes.
    """
    x = as_tensor(x)
    half = x.data.shape[-1] // 2

    def rot(v):
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    data = x.data * cos + rot(x.data) * sin

    def backward(g):
        if x.requires_grad:
            gs = g * sin
            # adjoint of rot: [a, b] -> [b, -a]
            rot_t = np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1)
            _accumulate(x, g * cos + rot_t)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a) -> Tensor:
    """x * sigmoid(x), elementwise."""
    a = as_tensor(a)
    sig = _sigmoid(a.data)
    data = a.data * sig

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Output variance is 1 up to the usual eps correction sigma^2/(sigma^2+eps).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a last dimension of size >= 2, got %d" % d)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            gmean = gx.mean(axis=-1, keepdims=True)
            gdot = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (gx - gmean - xhat * gdot))

    return _make(data, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * probs).sum(axis=axis, keepdims=True)
            _accumulate(x, probs * (g - inner))

    return _make(probs, (x,), backward)


# ---------------------------------------------------------------------------
# Losses and reductions
# ---------------------------------------------------------------------------


def cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1 or logits.data.shape[0] < 2:
        raise ValueError("cross_entropy expects a 1-D logit vector of size >= 2")
    v = logits.data.shape[0]
    target = int(target)
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range for vocab {v}")
    m = logits.data.max()
    lse = m + np.log(np.exp(logits.data - m).sum())
    data = lse - logits.data[target]

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logits.data - lse)
            p[target] -= 1.0
            _accumulate(logits, g * p)

    return _make(data, (logits,), backward)


def cross_entropy_rows(logits, targets) -> Tensor:
    """Per-row -log softmax(logits)[target]; logits [T,V], targets [T] ints."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ValueError("targets must be a vector matching the row count")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise IndexError("target token id out of range")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    data = lse - logits.data[np.arange(t), targets]

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logits.data - lse[:, None])
            p[np.arange(t), targets] -= 1.0
            _accumulate(logits, g[:, None] * p)

    return _make(data, (logits,), backward)


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference over all elements (scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1_distance shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.abs(diff).sum() / n

    def backward(g):
        sgn = np.sign(diff) * (float(g) / n)
        if a.requires_grad:
            _accumulate(a, sgn)
        if b.requires_grad:
            _accumulate(b, -sgn)

    return _make(data, (a, b), backward)


def l1_rows(a, b) -> Tensor:
    """Per-row mean absolute difference; a, b [T,d] -> [T]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1_rows shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    d = diff.shape[-1]
    data = np.abs(diff).mean(axis=-1)

    def backward(g):
        sgn = np.sign(diff) * (g[..., None] / d)
        if a.requires_grad:
            _accumulate(a, sgn)
        if b.requires_grad:
            _accumulate(b, -sgn)

    return _make(data, (a, b), backward)


def tsum(a) -> Tensor:
    """Sum of all elements (scalar)."""
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g)))

    return _make(a.data.sum(), (a,), backward)


def dot_const(a, weights) -> Tensor:
    """Scalar sum(a * weights) with constant weights (loss masking)."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ValueError("weights must match the tensor shape")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, float(g) * w)

    return _make((a.data * w).sum(), (a,), backward)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def gradcheck(build_loss, params, eps: float = 1e-5, rtol: float = 1e-4,
              max_coords: int | None = None, rng=None) -> float:
    """Compare analytic gradients of `build_loss()` against central differences.

    `build_loss` must recompute the scalar loss from the current parameter
    values on every call. Checks every coordinate unless `max_coords` caps the
    sample per parameter. Returns the worst relative error seen; raises
    AssertionError when it exceeds `rtol`.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = build_loss().item()
            flat[i] = orig - eps
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(1.0, abs(numeric), abs(gflat[i]))
            err = abs(gflat[i] - numeric) / denom
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch on {p.name or 'param'}[{i}]: "
                    f"analytic {gflat[i]:.8g} vs numeric {numeric:.8g} (rel {err:.3g})"
                )
    return worst
