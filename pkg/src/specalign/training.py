"""Token-alignable multi-pass draft training.

Pass 1 is plain teacher forcing over the precomputed (token, feature)
dataset. Pass n >= 2 re-predicts every position with the trailing n-1 input
features replaced by the draft's own outputs from earlier passes, and gates
the loss with a cumulative alignment mask: a position only contributes when
the ground-truth token sat inside the draft's top-k at every window slot
leading up to it.

All passes of one batch run before a single optimizer step; masks are
recomputed from fresh logits each batch and carry no gradient. The feature
replacement is implemented as a multi-stream attention layout (one stream of
key/value pairs per source pass) so a pass over a length-l sequence is a
single forward over n*l slots. With exactly one decoder layer this is
mathematically identical to re-running the literal per-position replacement,
because keys and values depend only on each slot's own input pair.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NEG_INF, Tensor, add, cross_entropy_rows, dot_const, l1_rows, mul, narrow
from .dataset import FeatureDataset
from .draft import DraftModel
from .optim import AdamW


@dataclass(frozen=True)
class TrainConfig:
    k: int | None = 3           # top-k alignment window; None = no masking ("NA")
    steps: int = 3              # number of forward passes N
    lambda_tok: float = 1.0
    lambda_feat: float = 0.1
    lr: float = 1e-3            # desk-scale default; see paper_faithful()
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 0.5
    epochs: int = 5
    batch_size: int = 4
    warmup_steps: int = 0
    feature_loss_on: str = "regress"  # "regress" | "predict" | "both"
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("training.steps must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("training.k must be >= 1 or null")
        if self.feature_loss_on not in ("regress", "predict", "both"):
            raise ValueError("training.feature_loss_on must be regress|predict|both")
        if self.epochs < 0:
            raise ValueError("training.epochs must be >= 0")


def paper_faithful(**overrides) -> TrainConfig:
    """The published hyperparameters (tuned for 7B-scale runs, kept as a preset)."""
    base = TrainConfig(lr=3e-5, epochs=20, batch_size=4, warmup_steps=2000)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def top_k_token_ids(logits: np.ndarray, k: int) -> np.ndarray:
    """Ids of the k highest logits, ties resolved toward lower token ids."""
    v = logits.shape[-1]
    k = min(k, v)
    order = np.lexsort((np.arange(v), -logits))
    return order[:k]


def predictable_mask(logits: np.ndarray, ground_truth: int, k: int | None) -> int:
    """1 iff the ground-truth token is inside the top-k of the draft logits.

    k=None (alignment disabled) and k >= vocab always yield 1.
    """
    if k is None:
        return 1
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(ground_truth in top_k_token_ids(np.asarray(logits, dtype=np.float64), k))


def cumulative_mask(history, t: int, n: int) -> int:
    """Product of the predictable masks over window [t-n+1, t-1] (1-based).

    Window slots before the first position count as 1; n=1 masks nothing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    history = np.asarray(history)
    out = 1
    for i in range(t - n + 1, t):
        if i >= 1:
            out &= int(history[i - 1])
    return out


def pass_cumulative_masks(per_pass_masks: list[np.ndarray], n: int, length: int) -> np.ndarray:
    """Cumulative masks for pass n at every position (0-based arrays).

    Entry t multiplies the predictable mask of the draft token at position
    t-delta as produced by pass n-delta, for delta = 1..n-1; slots that fall
    before the first predicted position count as 1. per_pass_masks[p-1] is
    pass p's predictable-mask array (index t, valid from t=1).
    """
    out = np.ones(length, dtype=np.int64)
    for t in range(length):
        for delta in range(1, n):
            src = t - delta
            if src >= 1:
                out[t] &= int(per_pass_masks[n - delta - 1][src])
    return out


# ---------------------------------------------------------------------------
# Multi-stream pass layout
# ---------------------------------------------------------------------------


def pass_layout(length: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions and attention bias for the n-stream pass layout.

    Slot (p, j) = p*length + j holds position j's input pair as seen by pass
    p+1. A query at (p, j) may attend (p', i) iff i <= j and
    p' == max(0, p + i - j): the slot itself from its own stream, each closer
    predecessor from one stream earlier, and the rest from ground truth.
    """
    total = n * length
    stream = np.repeat(np.arange(n), length)
    pos = np.tile(np.arange(length), n)
    need = np.maximum(0, stream[:, None] + pos[None, :] - pos[:, None])
    allowed = (pos[None, :] <= pos[:, None]) & (stream[None, :] == need)
    bias = np.where(allowed, 0.0, NEG_INF)
    return pos, bias


def masked_mean(per_position: Tensor, mask: np.ndarray) -> Tensor:
    """sum(mask * per_position) / sum(mask); an all-zero mask yields a
    constant 0 with no gradient path."""
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        return Tensor(0.0)
    return mul(dot_const(per_position, mask), 1.0 / total)


@dataclass
class PassResult:
    loss: Tensor
    logits: np.ndarray           # [length, V]; row t = prediction for position t (t >= 1)
    regress: np.ndarray          # [length, d]; row t = regress feature for position t
    predictable: np.ndarray      # [length] 0/1; valid from index 1
    cumulative: np.ndarray       # [length] 0/1 mask applied to this pass's loss
    masked_fraction: float       # fraction of scored positions with mask 0


def training_pass(draft: DraftModel, tokens: np.ndarray, gt_features: np.ndarray,
                  pass_n: int, prev_regress: list[np.ndarray],
                  prev_masks: list[np.ndarray], config: TrainConfig) -> PassResult:
    """One forward pass of the schedule; returns the masked loss and the
    artifacts later passes need (regress features, predictable mask).

    `prev_regress[p-1]` / `prev_masks[p-1]` come from pass p; pass 1 takes
    empty lists. Loss gradients flow only through positions whose cumulative
    mask is 1; an all-zero mask yields a constant 0 loss.
    """
    length = int(tokens.size)
    if length < 2:
        raise ValueError("training sequences need length >= 2")
    if pass_n < 1:
        raise ValueError("pass index must be >= 1")
    if len(prev_regress) < pass_n - 1 or len(prev_masks) < pass_n - 1:
        raise ValueError(f"pass {pass_n} needs {pass_n - 1} earlier pass results")

    positions, bias = pass_layout(length, pass_n)
    ids = np.tile(tokens, pass_n)
    feats = np.concatenate([gt_features] + [prev_regress[p] for p in range(pass_n - 1)], axis=0)

    predict_t, regress_t = draft.forward_train(ids, feats, positions, bias)
    last = (pass_n - 1) * length
    # Output at slot j predicts position j+1; score positions 1..length-1.
    predict_out = narrow(predict_t, 0, last, length - 1)
    regress_out = narrow(regress_t, 0, last, length - 1)
    logits_t = draft.logits_t(predict_out)

    cum = pass_cumulative_masks(prev_masks, pass_n, length)
    scored_mask = cum[1:].astype(np.float64)

    ce = cross_entropy_rows(logits_t, tokens[1:])
    if config.feature_loss_on == "regress":
        feat_err = l1_rows(regress_out, gt_features[1:])
    elif config.feature_loss_on == "predict":
        feat_err = l1_rows(predict_out, gt_features[1:])
    else:
        feat_err = mul(add(l1_rows(regress_out, gt_features[1:]),
                           l1_rows(predict_out, gt_features[1:])), 0.5)
    per_position = add(mul(ce, config.lambda_tok), mul(feat_err, config.lambda_feat))
    loss = masked_mean(per_position, scored_mask)

    logits = np.zeros((length, draft.config.vocab_size))
    logits[1:] = logits_t.data
    regress = np.zeros((length, draft.config.d_model))
    regress[0] = gt_features[0]  # no prediction exists for position 0
    regress[1:] = regress_out.data

    pred_mask = np.ones(length, dtype=np.int64)
    for t in range(1, length):
        pred_mask[t] = predictable_mask(logits[t], int(tokens[t]), config.k)

    return PassResult(
        loss=loss,
        logits=logits,
        regress=regress,
        predictable=pred_mask,
        cumulative=cum,
        masked_fraction=float(1.0 - scored_mask.mean()) if length > 1 else 0.0,
    )


def run_passes(draft: DraftModel, tokens: np.ndarray, gt_features: np.ndarray,
               config: TrainConfig) -> list[PassResult]:
    """Run passes 1..N for one sequence, threading regress features and masks."""
    results: list[PassResult] = []
    prev_regress: list[np.ndarray] = []
    prev_masks: list[np.ndarray] = []
    for n in range(1, config.steps + 1):
        res = training_pass(draft, tokens, gt_features, n, prev_regress, prev_masks, config)
        results.append(res)
        prev_regress.append(res.regress)
        prev_masks.append(res.predictable)
    return results


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleStats:
    loss_curves: dict[int, list[float]] = field(default_factory=dict)    # pass -> per-epoch loss
    masked_fraction: dict[int, list[float]] = field(default_factory=dict)

    def final_masked_fraction(self) -> dict[int, float]:
        return {n: vals[-1] for n, vals in self.masked_fraction.items() if vals}


def run_schedule(dataset: FeatureDataset, draft: DraftModel, config: TrainConfig,
                 log_path=None) -> ScheduleStats:
    """Optimize the draft over the dataset with the N-pass masked objective.

    Each batch runs passes 1..N, sums their losses, and takes one AdamW step.
    Writes one JSON-lines record per (epoch, pass) when `log_path` is given.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    opt = AdamW(draft.parameters(), lr=config.lr, betas=config.betas,
                clip_value=config.grad_clip, warmup_steps=config.warmup_steps)
    rng = np.random.default_rng(config.seed)
    stats = ScheduleStats(
        loss_curves={n: [] for n in range(1, config.steps + 1)},
        masked_fraction={n: [] for n in range(1, config.steps + 1)},
    )
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            epoch_start = time.perf_counter()
            order = rng.permutation(len(dataset))
            sums = {n: 0.0 for n in range(1, config.steps + 1)}
            fracs = {n: 0.0 for n in range(1, config.steps + 1)}
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                opt.zero_grad()
                for idx in batch:
                    tokens = dataset.tokens(int(idx))
                    feats = dataset.features(int(idx))
                    results = run_passes(draft, tokens, feats, config)
                    total = results[0].loss
                    for res in results[1:]:
                        total = add(total, res.loss)
                    mul(total, 1.0 / len(batch)).backward()
                    for n, res in enumerate(results, start=1):
                        sums[n] += res.loss.item()
                        fracs[n] += res.masked_fraction
                opt.step()
            elapsed = time.perf_counter() - epoch_start
            for n in range(1, config.steps + 1):
                mean_loss = sums[n] / len(order)
                mean_frac = fracs[n] / len(order)
                stats.loss_curves[n].append(mean_loss)
                stats.masked_fraction[n].append(mean_frac)
                if log_fh is not None:
                    record = {"epoch": epoch, "pass": n, "loss": mean_loss,
                              "masked_fraction": mean_frac, "wall_time_s": elapsed}
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return stats
