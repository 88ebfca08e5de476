"""Shared fixtures: a tiny trained target for unit tests and the calibrated
toy world (target + three trained drafts) for acceptance runs."""

from dataclasses import dataclass

import numpy as np
import pytest

from specalign.corpus import CorpusConfig, generate_corpus, sample_prompts
from specalign.dataset import FeatureDataset, precompute_features
from specalign.draft import DraftConfig, DraftModel, DraftVariant, make_draft
from specalign.target import TargetConfig, TargetModel
from specalign.training import TrainConfig, run_schedule


@pytest.fixture(scope="session")
def tiny_world():
    """Small trained target + dataset (vocab 12, d 16): fast unit-test substrate."""
    ccfg = CorpusConfig(vocab_size=12, n_sequences=24, seq_len=20, kind="markov",
                        peak=0.8, n_alternatives=2, seed=7)
    corpus = generate_corpus(ccfg)
    target = TargetModel(TargetConfig(vocab_size=12, d_model=16, n_layers=2,
                                      n_heads=2, max_seq=64, seed=8))
    target.train_on_corpus(corpus, epochs=2, lr=3e-3, batch_size=8, seed=9)
    target.freeze()
    dataset = precompute_features(target, corpus)
    return ccfg, corpus, target, dataset


@pytest.fixture()
def tiny_draft(tiny_world):
    _, _, target, _ = tiny_world
    return make_draft(DraftConfig(vocab_size=12, d_model=16, n_heads=2, seed=13), target)


@dataclass
class ToyWorld:
    corpus_config: CorpusConfig
    corpus: list
    target: TargetModel
    dataset: FeatureDataset
    griffin: DraftModel        # N=3, k=3, full architecture
    n1: DraftModel             # N=1 training, same architecture
    no_tgf: DraftModel         # N=3, fusion disabled
    untrained: DraftModel

    def prompts(self, n: int, length: int = 10, seed: int = 101) -> list:
        return sample_prompts(self.corpus_config, n, length, seed=seed)


TOY_SEED = 0


@pytest.fixture(scope="session")
def toy_world() -> ToyWorld:
    """The calibrated desk-scale setup used by the acceptance criteria."""
    ccfg = CorpusConfig(vocab_size=64, n_sequences=200, seq_len=48, kind="markov",
                        peak=0.72, n_alternatives=3, seed=TOY_SEED)
    corpus = generate_corpus(ccfg)
    target = TargetModel(TargetConfig(vocab_size=64, d_model=32, n_layers=4,
                                      n_heads=4, max_seq=192, seed=TOY_SEED + 1))
    target.train_on_corpus(corpus, epochs=5, lr=3e-3, batch_size=16, seed=TOY_SEED + 7)
    target.freeze()
    dataset = precompute_features(target, corpus)

    def trained(steps, use_tgf=True, seed=TOY_SEED + 2):
        cfg = DraftConfig(vocab_size=64, d_model=32, n_heads=4, seed=seed,
                          variant=DraftVariant(use_tgf=use_tgf))
        draft = make_draft(cfg, target)
        run_schedule(dataset, draft,
                     TrainConfig(k=3, steps=steps, epochs=4, lr=1e-3, batch_size=4,
                                 seed=TOY_SEED + 3))
        return draft

    griffin = trained(3)
    n1 = trained(1)
    no_tgf = trained(3, use_tgf=False)
    untrained = make_draft(DraftConfig(vocab_size=64, d_model=32, n_heads=4,
                                       seed=TOY_SEED + 5), target)
    return ToyWorld(corpus_config=ccfg, corpus=corpus, target=target, dataset=dataset,
                    griffin=griffin, n1=n1, no_tgf=no_tgf, untrained=untrained)
