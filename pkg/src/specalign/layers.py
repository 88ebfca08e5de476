"""Shared transformer building blocks for the target and draft models.

One pre-norm decoder layer: multi-head attention with rotary position
embeddings and an explicit additive attention bias (causal, tree-structured,
or multi-stream), followed by a SiLU MLP. Both models stack these blocks, so
their feature spaces share the same conventions.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    NEG_INF,
    Parameter,
    Tensor,
    add,
    bmm,
    layer_norm,
    matmul,
    mul,
    reshape,
    rotary,
    silu,
    softmax,
    transpose,
)

ROTARY_BASE = 10000.0


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


_CAUSAL_CACHE: dict[int, np.ndarray] = {}
_ROTARY_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def causal_bias(n: int) -> np.ndarray:
    """[n,n] additive bias: 0 on/below the diagonal, NEG_INF above."""
    cached = _CAUSAL_CACHE.get(n)
    if cached is None:
        cached = np.zeros((n, n))
        cached[np.triu_indices(n, k=1)] = NEG_INF
        cached.setflags(write=False)
        _CAUSAL_CACHE[n] = cached
    return cached


def rotary_tables(positions, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T, head_dim] for the given absolute positions (cached)."""
    if head_dim % 2 != 0:
        raise ValueError("rotary embedding needs an even head dimension")
    positions = np.asarray(positions, dtype=np.float64)
    key = (head_dim, positions.tobytes())
    cached = _ROTARY_CACHE.get(key)
    if cached is None:
        half = head_dim // 2
        inv_freq = ROTARY_BASE ** (-np.arange(half) * 2.0 / head_dim)
        angles = positions[:, None] * inv_freq[None, :]
        cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
        sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
        cos.setflags(write=False)
        sin.setflags(write=False)
        if len(_ROTARY_CACHE) > 4096:
            _ROTARY_CACHE.clear()
        cached = (cos, sin)
        _ROTARY_CACHE[key] = cached
    return cached


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate [H,T,hd] head vectors: x*cos + rotate_half(x)*sin."""
    return rotary(x, cos, sin)


class LayerNormParams:
    """Learnable affine pair, initialized to the identity map."""

    def __init__(self, d: int, name: str):
        self.gain = Parameter(np.ones(d), name=f"{name}.gain")
        self.bias = Parameter(np.zeros(d), name=f"{name}.bias")

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=eps)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]


class Attention:
    """Multi-head self-attention with rotary positions and additive bias."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, name: str):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = Parameter(init_normal(rng, (d_model, d_model)), name=f"{name}.wq")
        self.wk = Parameter(init_normal(rng, (d_model, d_model)), name=f"{name}.wk")
        self.wv = Parameter(init_normal(rng, (d_model, d_model)), name=f"{name}.wv")
        self.wo = Parameter(init_normal(rng, (d_model, d_model)), name=f"{name}.wo")

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]

    def __call__(self, x: Tensor, positions: np.ndarray, bias: np.ndarray) -> Tensor:
        t = x.shape[0]
        h, hd = self.n_heads, self.head_dim
        cos, sin = rotary_tables(positions, hd)

        def split_heads(m: Tensor) -> Tensor:
            return transpose(reshape(m, (t, h, hd)), (1, 0, 2))  # [H,T,hd]

        q = apply_rotary(split_heads(matmul(x, self.wq)), cos, sin)
        k = apply_rotary(split_heads(matmul(x, self.wk)), cos, sin)
        v = split_heads(matmul(x, self.wv))
        scores = mul(bmm(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        probs = softmax(add(scores, bias[None, :, :]), axis=-1)
        mixed = transpose(bmm(probs, v), (1, 0, 2))  # [T,H,hd]
        return matmul(reshape(mixed, (t, h * hd)), self.wo)


class Mlp:
    """Position-wise SiLU MLP with a 4x hidden expansion."""

    def __init__(self, d_model: int, rng: np.random.Generator, name: str):
        hidden = 4 * d_model
        self.w_up = Parameter(init_normal(rng, (d_model, hidden)), name=f"{name}.w_up")
        self.b_up = Parameter(np.zeros(hidden), name=f"{name}.b_up")
        self.w_down = Parameter(init_normal(rng, (hidden, d_model)), name=f"{name}.w_down")
        self.b_down = Parameter(np.zeros(d_model), name=f"{name}.b_down")

    def parameters(self) -> list[Parameter]:
        return [self.w_up, self.b_up, self.w_down, self.b_down]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(silu(add(matmul(x, self.w_up), self.b_up)), self.w_down), self.b_down)


class DecoderLayer:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 name: str, ln_eps: float = 1e-5):
        self.ln_eps = ln_eps
        self.ln_attn = LayerNormParams(d_model, f"{name}.ln_attn")
        self.attn = Attention(d_model, n_heads, rng, f"{name}.attn")
        self.ln_mlp = LayerNormParams(d_model, f"{name}.ln_mlp")
        self.mlp = Mlp(d_model, rng, f"{name}.mlp")

    def parameters(self) -> list[Parameter]:
        return (self.ln_attn.parameters() + self.attn.parameters()
                + self.ln_mlp.parameters() + self.mlp.parameters())

    def __call__(self, x: Tensor, positions: np.ndarray, bias: np.ndarray) -> Tensor:
        x = add(x, self.attn(self.ln_attn(x, self.ln_eps), positions, bias))
        return add(x, self.mlp(self.ln_mlp(x, self.ln_eps)))
