"""specalign: a desk-scale speculative-decoding laboratory.

A toy transformer target model, a token-alignable draft model (token-guided
fusion + dual output head), masked multi-pass draft training, a lossless
draft-and-verify decode engine (chain and dynamic-tree drafting, greedy and
sampling acceptance), and an experiment harness with an analytic latency
model.
"""

from .autodiff import Parameter, Tensor, gradcheck, no_grad
from .config import load_config
from .corpus import CorpusConfig, entropy_rate, generate_corpus
from .dataset import FeatureDataset, precompute_features
from .decode import (
    CycleMetrics,
    DraftTree,
    autoregressive_generate,
    draft_chain,
    draft_tree,
    misalignment_probe,
    speculative_generate,
    verify_greedy,
    verify_greedy_sequential,
    verify_sampling,
)
from .draft import DraftConfig, DraftModel, DraftVariant, make_draft
from .latency import LatencyModel, speedup_ratio
from .pipeline import ExperimentReport, run_pipeline
from .target import TargetConfig, TargetModel
from .training import TrainConfig, cumulative_mask, predictable_mask, run_schedule

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig",
    "CycleMetrics",
    "DraftConfig",
    "DraftModel",
    "DraftTree",
    "DraftVariant",
    "ExperimentReport",
    "FeatureDataset",
    "LatencyModel",
    "Parameter",
    "TargetConfig",
    "TargetModel",
    "Tensor",
    "TrainConfig",
    "autoregressive_generate",
    "cumulative_mask",
    "draft_chain",
    "draft_tree",
    "entropy_rate",
    "generate_corpus",
    "gradcheck",
    "load_config",
    "make_draft",
    "misalignment_probe",
    "no_grad",
    "precompute_features",
    "predictable_mask",
    "run_pipeline",
    "run_schedule",
    "speculative_generate",
    "speedup_ratio",
    "verify_greedy",
    "verify_greedy_sequential",
    "verify_sampling",
]
