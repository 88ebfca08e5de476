"""Analytic latency model for draft-and-verify decoding.

Autoregressive decoding of N tokens costs N*t; speculative decoding costs
(N/tau)*(t + d*t_draft) where each cycle runs d draft passes and one target
pass and commits tau tokens on average. The speedup ratio is the quotient:

    SR = t / (t + d * t_draft) * tau

Closed form, no simulation noise.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LatencyModel:
    target_ms: float = 25.0   # target per-pass latency t
    draft_ms: float = 1.5     # draft per-pass latency t-bar
    depth: int = 6            # rollout depth d (draft passes per cycle)
    tau: float = 5.0          # accepted tokens per cycle, bonus included

    def validate(self) -> None:
        if self.target_ms <= 0 or self.draft_ms < 0:
            raise ValueError("latencies must be positive (draft may be zero)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.tau < 1:
            raise ValueError("tau must be >= 1 (each cycle commits the bonus token)")


def speedup_ratio(model: LatencyModel) -> float:
    """t / (t + d * t_draft) * tau."""
    model.validate()
    return model.target_ms / (model.target_ms + model.depth * model.draft_ms) * model.tau
