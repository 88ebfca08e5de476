"""Synthetic integer-token corpora for the toy pipeline.

Two generators: first-order Markov chains with a dominant transition per
state (learnable structure whose entropy rate is known in closed form), and
repeated fixed patterns (memorization checks). Corpora are plain lists of
token-id lists; there is no tokenizer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 64
    n_sequences: int = 320
    seq_len: int = 48
    kind: str = "markov"  # "markov" | "pattern"
    peak: float = 0.8     # probability mass on the dominant next state
    n_alternatives: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("corpus.vocab_size must be >= 2")
        if self.kind not in ("markov", "pattern"):
            raise ValueError(f"corpus.kind must be markov|pattern, got {self.kind!r}")
        if not 0.0 < self.peak <= 1.0:
            raise ValueError("corpus.peak must be in (0, 1]")
        if self.n_alternatives >= self.vocab_size:
            raise ValueError("corpus.n_alternatives must be < vocab_size")


def markov_matrix(config: CorpusConfig) -> np.ndarray:
    """Row-stochastic transition matrix: one dominant successor per state plus
    a few low-probability alternatives."""
    rng = np.random.default_rng(config.seed)
    v = config.vocab_size
    perm = rng.permutation(v)
    matrix = np.zeros((v, v))
    rest = 1.0 - config.peak
    for s in range(v):
        matrix[s, perm[s]] = config.peak
        others = [c for c in rng.permutation(v) if c != perm[s]][: config.n_alternatives]
        for c in others:
            matrix[s, c] += rest / len(others)
    return matrix


def stationary_distribution(matrix: np.ndarray, iters: int = 2000) -> np.ndarray:
    pi = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    for _ in range(iters):
        pi = pi @ matrix
    return pi / pi.sum()


def entropy_rate(matrix: np.ndarray) -> float:
    """Entropy rate (nats/token) of the stationary chain."""
    pi = stationary_distribution(matrix)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(matrix > 0, np.log(matrix), 0.0)
    return float(-(pi[:, None] * matrix * logs).sum())


def sample_markov(matrix: np.ndarray, n_sequences: int, seq_len: int,
                  rng: np.random.Generator) -> list[list[int]]:
    v = matrix.shape[0]
    pi = stationary_distribution(matrix)
    out = []
    for _ in range(n_sequences):
        seq = [int(rng.choice(v, p=pi))]
        for _ in range(seq_len - 1):
            seq.append(int(rng.choice(v, p=matrix[seq[-1]])))
        out.append(seq)
    return out


def sample_pattern(config: CorpusConfig, rng: np.random.Generator) -> list[list[int]]:
    """Sequences built by tiling short random motifs."""
    out = []
    for _ in range(config.n_sequences):
        motif = rng.integers(0, config.vocab_size, size=rng.integers(3, 7)).tolist()
        reps = (config.seq_len + len(motif) - 1) // len(motif)
        out.append((motif * reps)[: config.seq_len])
    return out


def generate_corpus(config: CorpusConfig) -> list[list[int]]:
    config.validate()
    rng = np.random.default_rng(config.seed + 1)
    if config.kind == "markov":
        return sample_markov(markov_matrix(config), config.n_sequences, config.seq_len, rng)
    return sample_pattern(config, rng)


def corpus_sha256(corpus: list[list[int]]) -> str:
    payload = json.dumps(corpus, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


def sample_prompts(config: CorpusConfig, n_prompts: int, prompt_len: int,
                   seed: int) -> list[list[int]]:
    """Fresh prompts from the same distribution, disjoint RNG stream."""
    rng = np.random.default_rng(seed)
    if config.kind == "markov":
        return sample_markov(markov_matrix(config), n_prompts, prompt_len, rng)
    alt = CorpusConfig(vocab_size=config.vocab_size, n_sequences=n_prompts,
                       seq_len=prompt_len, kind="pattern", seed=seed)
    return sample_pattern(alt, rng)
