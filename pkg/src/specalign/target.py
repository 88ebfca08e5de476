"""Toy decoder-only transformer target model.

Exposes, per position, the final hidden state ("feature", the vector right
before the LM head) and the vocabulary logits. The embedding table and LM
head are the tables later shared with the draft model, so
`logits[i] == features[i] @ lm_head` holds at every position by construction.

The model is tiny and recomputes every forward from scratch (no KV cache);
custom attention biases and positions support tree-structured verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    cross_entropy_rows,
    gather_rows,
    matmul,
    mul,
    narrow,
    no_grad,
    tsum,
)
from .layers import DecoderLayer, LayerNormParams, causal_bias, init_normal
from .optim import AdamW


@dataclass(frozen=True)
class TargetConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    max_seq: int = 64
    seed: int = 0
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("target.vocab_size must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("target.d_model must be divisible by n_heads")
        if self.max_seq < 1:
            raise ValueError("target.max_seq must be >= 1")


@dataclass
class TargetOutput:
    features: np.ndarray  # [T, d_model]
    logits: np.ndarray    # [T, vocab]


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


class TargetModel:
    def __init__(self, config: TargetConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, v = config.d_model, config.vocab_size
        self.embedding = Parameter(init_normal(rng, (v, d)), name="embedding")
        self.layers = [
            DecoderLayer(d, config.n_heads, rng, f"layer{i}", config.ln_eps)
            for i in range(config.n_layers)
        ]
        self.final_ln = LayerNormParams(d, "final_ln")
        self.lm_head = Parameter(init_normal(rng, (d, v)), name="lm_head")

    def parameters(self) -> list[Parameter]:
        params = [self.embedding]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend(self.final_ln.parameters())
        params.append(self.lm_head)
        return params

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def _validate_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token input must be a non-empty 1-D sequence")
        if ids.size > self.config.max_seq:
            raise ValueError(f"sequence length {ids.size} exceeds max_seq {self.config.max_seq}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary")
        return ids

    def _features_t(self, ids: np.ndarray, positions: np.ndarray, bias: np.ndarray) -> Tensor:
        x = gather_rows(self.embedding, ids)
        for layer in self.layers:
            x = layer(x, positions, bias)
        return self.final_ln(x, self.config.ln_eps)

    def _logits_t(self, features: Tensor) -> Tensor:
        return matmul(features, self.lm_head)

    def forward(self, tokens) -> TargetOutput:
        """Causal forward over one sequence; grad-free."""
        ids = self._validate_tokens(tokens)
        positions = np.arange(ids.size)
        with no_grad():
            feats = self._features_t(ids, positions, causal_bias(ids.size))
            logits = self._logits_t(feats)
        return TargetOutput(features=feats.data, logits=logits.data)

    def forward_custom(self, tokens, positions, bias: np.ndarray) -> TargetOutput:
        """Forward with explicit positions and additive attention bias.

        Used for tree-structured verification; callers own mask correctness.
        """
        ids = self._validate_tokens(tokens)
        with no_grad():
            feats = self._features_t(ids, np.asarray(positions), bias)
            logits = self._logits_t(feats)
        return TargetOutput(features=feats.data, logits=logits.data)

    def greedy_next(self, tokens) -> int:
        """Argmax of the last position's logits; ties go to the lowest id."""
        return int(np.argmax(self.forward(tokens).logits[-1]))

    def sample_next(self, tokens, temperature: float, rng: np.random.Generator) -> int:
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if temperature == 0:
            return self.greedy_next(tokens)
        probs = softmax_np(self.forward(tokens).logits[-1] / temperature)
        return int(rng.choice(probs.size, p=probs))

    # -- training ----------------------------------------------------------

    def sequence_loss(self, ids: np.ndarray) -> Tensor:
        """Mean next-token cross-entropy over one sequence (graph-building)."""
        positions = np.arange(ids.size)
        feats = self._features_t(ids, positions, causal_bias(ids.size))
        logits = self._logits_t(feats)
        pred = narrow(logits, 0, 0, ids.size - 1)
        ce = cross_entropy_rows(pred, ids[1:])
        return mul(tsum(ce), 1.0 / (ids.size - 1))

    def mean_corpus_loss(self, corpus: list[list[int]]) -> float:
        with no_grad():
            total = 0.0
            for seq in corpus:
                ids = self._validate_tokens(seq)
                logits = self.forward(ids).logits
                ce = -np.log(softmax_np(logits[:-1])[np.arange(ids.size - 1), ids[1:]])
                total += float(ce.mean())
        return total / len(corpus)

    def train_on_corpus(self, corpus: list[list[int]], epochs: int, lr: float,
                        batch_size: int = 8, seed: int = 0) -> list[float]:
        """Next-token training with AdamW; returns the per-epoch mean loss."""
        if not corpus:
            raise ValueError("corpus is empty")
        for seq in corpus:
            if len(seq) < 2:
                raise ValueError("corpus sequences need length >= 2")
        history: list[float] = []
        if epochs == 0:
            return history
        opt = AdamW(self.parameters(), lr=lr, clip_value=None)
        rng = np.random.default_rng(seed)
        for _ in range(epochs):
            order = rng.permutation(len(corpus))
            epoch_loss = 0.0
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                opt.zero_grad()
                for idx in batch:
                    ids = np.asarray(corpus[idx], dtype=np.int64)
                    loss = mul(self.sequence_loss(ids), 1.0 / len(batch))
                    loss.backward()
                    epoch_loss += loss.item() * len(batch)
                opt.step()
            history.append(epoch_loss / len(corpus))
        return history
