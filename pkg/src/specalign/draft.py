"""Token-alignable draft model: token-guided fusion, one decoder layer, and a
dual output head.

Per position the model consumes a (token, feature) pair: the token embedding
comes from the target's frozen table, the feature is the target's hidden
state (or, in later passes and during decoding, the draft's own regress
output). The fusion block injects the token embedding twice:

    h = concat(f, e) @ w_mix + b_mix                     (blend)
    z = concat(ln(h), ln(second)) @ w_up + b_up          (normalize + expand)
    o = silu(z) @ w_down + b_down + h                    (refine + residual)

with `second` selectable as the token embedding (default), the raw feature,
or the blended h — the architecture-ablation variants. With fusion disabled
the pair is combined additively (f + e), which keeps the parameter-count
delta of enabling fusion exactly equal to the fusion block's own size.

After the decoder layer, the dual head emits a predict-feature (fed to the
shared LM head for token logits) and a regress-feature (recycled as the next
pass's input). With the dual head disabled a single shared head serves both
roles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    gather_rows,
    matmul,
    no_grad,
    silu,
)
from .checkpoint import read_checkpoint, write_checkpoint
from .layers import DecoderLayer, LayerNormParams, causal_bias, init_normal

FORMAT_TAG = "specalign-draft"
FORMAT_VERSION = 1

SECOND_INPUTS = ("token_embedding", "raw_feature", "fused_h")


@dataclass(frozen=True)
class DraftVariant:
    use_tgf: bool = True
    use_teh: bool = True
    tgf_second_input: str = "token_embedding"

    def validate(self) -> None:
        if self.tgf_second_input not in SECOND_INPUTS:
            raise ValueError(
                f"tgf_second_input must be one of {SECOND_INPUTS}, got {self.tgf_second_input!r}"
            )


@dataclass(frozen=True)
class DraftConfig:
    vocab_size: int
    d_model: int
    n_heads: int = 4
    expansion_dim: int | None = None  # None -> 4 * d_model
    seed: int = 0
    ln_eps: float = 1e-5
    variant: DraftVariant = field(default_factory=DraftVariant)

    @property
    def d_exp(self) -> int:
        return self.expansion_dim if self.expansion_dim is not None else 4 * self.d_model

    def validate(self) -> None:
        self.variant.validate()
        if self.d_model % self.n_heads != 0:
            raise ValueError("draft.d_model must be divisible by n_heads")
        if self.d_exp < 1:
            raise ValueError("draft.expansion_dim must be >= 1")


@dataclass
class DraftOutput:
    predict_features: np.ndarray  # [T, d]
    regress_features: np.ndarray  # [T, d]


class TokenGuidedFusion:
    """Three-step fusion of a feature row and a token-embedding row."""

    def __init__(self, d: int, d_exp: int, rng: np.random.Generator, ln_eps: float):
        self.ln_eps = ln_eps
        self.w_mix = Parameter(init_normal(rng, (2 * d, d)), name="tgf.w_mix")
        self.b_mix = Parameter(np.zeros(d), name="tgf.b_mix")
        self.ln_h = LayerNormParams(d, "tgf.ln_h")
        self.ln_second = LayerNormParams(d, "tgf.ln_second")
        self.w_up = Parameter(init_normal(rng, (2 * d, d_exp)), name="tgf.w_up")
        self.b_up = Parameter(np.zeros(d_exp), name="tgf.b_up")
        self.w_down = Parameter(init_normal(rng, (d_exp, d)), name="tgf.w_down")
        self.b_down = Parameter(np.zeros(d), name="tgf.b_down")

    def parameters(self) -> list[Parameter]:
        return ([self.w_mix, self.b_mix] + self.ln_h.parameters()
                + self.ln_second.parameters()
                + [self.w_up, self.b_up, self.w_down, self.b_down])

    def __call__(self, feats: Tensor, emb: Tensor, second_input: str) -> Tensor:
        h = add(matmul(concat([feats, emb], axis=1), self.w_mix), self.b_mix)
        second = {"token_embedding": emb, "raw_feature": feats, "fused_h": h}[second_input]
        pair = concat([self.ln_h(h, self.ln_eps), self.ln_second(second, self.ln_eps)], axis=1)
        z = add(matmul(pair, self.w_up), self.b_up)
        return add(add(matmul(silu(z), self.w_down), self.b_down), h)


class DualHead:
    """Two independent d->d heads: one predict-feature, one regress-feature."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.w_predict = Parameter(init_normal(rng, (d, d)), name="head.w_predict")
        self.b_predict = Parameter(np.zeros(d), name="head.b_predict")
        self.w_regress = Parameter(init_normal(rng, (d, d)), name="head.w_regress")
        self.b_regress = Parameter(np.zeros(d), name="head.b_regress")

    def parameters(self) -> list[Parameter]:
        return [self.w_predict, self.b_predict, self.w_regress, self.b_regress]

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        predict = add(matmul(x, self.w_predict), self.b_predict)
        regress = add(matmul(x, self.w_regress), self.b_regress)
        return predict, regress


class SharedHead:
    """Single d->d head used for both output roles when the dual head is off."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.w_shared = Parameter(init_normal(rng, (d, d)), name="head.w_shared")
        self.b_shared = Parameter(np.zeros(d), name="head.b_shared")

    def parameters(self) -> list[Parameter]:
        return [self.w_shared, self.b_shared]

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        out = add(matmul(x, self.w_shared), self.b_shared)
        return out, out


class DraftModel:
    """One-decoder-layer draft model over (token, feature) pairs.

    `embedding` [V,d] and `lm_head` [d,V] are the target's frozen tables;
    output index i depends only on inputs 0..i and predicts step i+1.
    """

    def __init__(self, config: DraftConfig, embedding: Parameter, lm_head: Parameter):
        config.validate()
        if embedding.data.shape != (config.vocab_size, config.d_model):
            raise ValueError("embedding table shape does not match draft config")
        if lm_head.data.shape != (config.d_model, config.vocab_size):
            raise ValueError("lm head shape does not match draft config")
        self.config = config
        self.embedding = embedding
        self.lm_head = lm_head
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.tgf = TokenGuidedFusion(d, config.d_exp, rng, config.ln_eps)
        self.layer = DecoderLayer(d, config.n_heads, rng, "draft_layer", config.ln_eps)
        self.final_ln = LayerNormParams(d, "draft_final_ln")
        self.dual_head = DualHead(d, rng)
        self.shared_head = SharedHead(d, rng)

    # -- parameter bookkeeping ---------------------------------------------

    def parameters(self) -> list[Parameter]:
        """Active trainable parameters for the configured variant."""
        params: list[Parameter] = []
        if self.config.variant.use_tgf:
            params.extend(self.tgf.parameters())
        params.extend(self.layer.parameters())
        params.extend(self.final_ln.parameters())
        head = self.dual_head if self.config.variant.use_teh else self.shared_head
        params.extend(head.parameters())
        return params

    def all_parameters(self) -> list[Parameter]:
        """Every allocated parameter, active or not (inactive stay zero-grad)."""
        return (self.tgf.parameters() + self.layer.parameters()
                + self.final_ln.parameters() + self.dual_head.parameters()
                + self.shared_head.parameters())

    def param_count(self) -> int:
        """Size of the active parameter set (shared frozen tables excluded)."""
        return sum(p.size for p in self.parameters())

    def param_breakdown(self) -> dict[str, int]:
        head = self.dual_head if self.config.variant.use_teh else self.shared_head
        return {
            "fusion": sum(p.size for p in self.tgf.parameters()) if self.config.variant.use_tgf else 0,
            "decoder_layer": sum(p.size for p in self.layer.parameters()),
            "final_norm": sum(p.size for p in self.final_ln.parameters()),
            "heads": sum(p.size for p in head.parameters()),
        }

    @staticmethod
    def tgf_param_delta(d: int, d_exp: int) -> int:
        """Analytic parameter growth from enabling fusion."""
        return (2 * d * d + d) + (2 * d * d_exp + d_exp) + (d_exp * d + d) + 4 * d

    # -- forward paths -------------------------------------------------------

    def _fuse(self, feats: Tensor, emb: Tensor) -> Tensor:
        if self.config.variant.use_tgf:
            return self.tgf(feats, emb, self.config.variant.tgf_second_input)
        return add(feats, emb)

    def _core(self, ids: np.ndarray, feats, positions: np.ndarray,
              bias: np.ndarray) -> tuple[Tensor, Tensor]:
        emb = gather_rows(self.embedding, ids)
        x = self._fuse(as_tensor(feats), emb)
        x = self.layer(x, positions, bias)
        x = self.final_ln(x, self.config.ln_eps)
        head = self.dual_head if self.config.variant.use_teh else self.shared_head
        return head(x)

    def _validate_pair(self, tokens, features) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(tokens, dtype=np.int64)
        feats = np.asarray(features, dtype=np.float64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token input must be a non-empty 1-D sequence")
        if feats.shape != (ids.size, self.config.d_model):
            raise ValueError(
                f"features must be [{ids.size}, {self.config.d_model}], got {feats.shape}"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary")
        return ids, feats

    def forward(self, tokens, features) -> DraftOutput:
        """Causal forward over aligned (token, feature) pairs; grad-free."""
        ids, feats = self._validate_pair(tokens, features)
        with no_grad():
            predict, regress = self._core(ids, feats, np.arange(ids.size),
                                          causal_bias(ids.size))
        return DraftOutput(predict_features=predict.data, regress_features=regress.data)

    def forward_custom(self, tokens, features, positions, bias: np.ndarray) -> DraftOutput:
        """Grad-free forward with explicit positions and attention bias."""
        ids, feats = self._validate_pair(tokens, features)
        with no_grad():
            predict, regress = self._core(ids, feats, np.asarray(positions), bias)
        return DraftOutput(predict_features=predict.data, regress_features=regress.data)

    def forward_train(self, tokens, features, positions, bias: np.ndarray) -> tuple[Tensor, Tensor]:
        """Graph-building forward; features are treated as constants."""
        ids, feats = self._validate_pair(tokens, features)
        return self._core(ids, feats, np.asarray(positions), bias)

    def draft_logits(self, features) -> np.ndarray:
        """Apply the frozen target LM head to predict-features ([.., d] -> [.., V])."""
        return np.asarray(features, dtype=np.float64) @ self.lm_head.data

    def logits_t(self, features: Tensor) -> Tensor:
        return matmul(features, self.lm_head)

    def tgf_fuse(self, feature_row, embedding_row) -> np.ndarray:
        """One fusion step on single rows (the unit the fusion oracle checks)."""
        f = np.atleast_2d(np.asarray(feature_row, dtype=np.float64))
        e = np.atleast_2d(np.asarray(embedding_row, dtype=np.float64))
        if f.shape[1] != self.config.d_model or e.shape[1] != self.config.d_model:
            raise ValueError("fusion inputs must be d_model wide")
        with no_grad():
            out = self.tgf(Tensor(f), Tensor(e), self.config.variant.tgf_second_input)
        return out.data[0] if np.asarray(feature_row).ndim == 1 else out.data

    # -- persistence ---------------------------------------------------------

    def _named_params(self) -> list[tuple[str, np.ndarray]]:
        own = [(p.name, p.data) for p in self.all_parameters()]
        shared = [("shared.embedding", self.embedding.data), ("shared.lm_head", self.lm_head.data)]
        return own + shared

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
        }
        if extra_meta:
            meta.update(extra_meta)
        write_checkpoint(path, meta, self._named_params())

    @classmethod
    def load(cls, path) -> "DraftModel":
        meta, values = read_checkpoint(path)
        if meta.get("format") != FORMAT_TAG:
            raise ValueError(f"{path} is not a {FORMAT_TAG} checkpoint")
        cfg = dict(meta["config"])
        cfg["variant"] = DraftVariant(**cfg["variant"])
        config = DraftConfig(**cfg)
        embedding = Parameter(values["shared.embedding"], trainable=False, name="embedding")
        lm_head = Parameter(values["shared.lm_head"], trainable=False, name="lm_head")
        model = cls(config, embedding, lm_head)
        for p in model.all_parameters():
            p.data[...] = values[p.name]
        return model


def make_draft(config: DraftConfig, target) -> DraftModel:
    """Build a draft sharing the target's (frozen) embedding and LM head."""
    target.embedding.trainable = False
    target.lm_head.trainable = False
    return DraftModel(config, target.embedding, target.lm_head)
