"""End-to-end experiment pipeline.

Stages: corpus -> train-target -> precompute -> train-draft -> decode ->
report. Every stage writes one artifact into the output directory together
with the config fingerprint, so a rerun skips finished stages and a stage
invoked without its inputs fails with an error naming the stage to run.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import fingerprint, validate_config
from .corpus import CorpusConfig, corpus_sha256, generate_corpus, sample_prompts
from .dataset import FeatureDataset, precompute_features
from .decode import misalignment_probe, speculative_generate
from .draft import DraftConfig, DraftModel, DraftVariant, make_draft
from .latency import LatencyModel, speedup_ratio
from .target import TargetConfig, TargetModel
from .training import TrainConfig, run_schedule

STAGE_ORDER = ("corpus", "train-target", "precompute", "train-draft", "decode", "report")

ARTIFACTS = {
    "corpus": "corpus.json",
    "train-target": "target.ckpt",
    "precompute": "dataset.bin",
    "train-draft": "draft.ckpt",
    "decode": "decode.json",
    "report": "report.json",
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# Config adapters
# ---------------------------------------------------------------------------


def corpus_config(config: dict) -> CorpusConfig:
    c = config["corpus"]
    return CorpusConfig(vocab_size=c["vocab_size"], n_sequences=c["n_sequences"],
                        seq_len=c["seq_len"], kind=c["kind"], peak=c["peak"],
                        n_alternatives=c["n_alternatives"], seed=config["seed"])


def target_config(config: dict) -> TargetConfig:
    t = config["target"]
    return TargetConfig(vocab_size=config["corpus"]["vocab_size"], d_model=t["d_model"],
                        n_layers=t["n_layers"], n_heads=t["n_heads"],
                        max_seq=t["max_seq"], seed=config["seed"] + 1)


def draft_config(config: dict, seed_offset: int = 2) -> DraftConfig:
    d = config["draft"]
    variant = DraftVariant(use_tgf=d["use_tgf"], use_teh=d["use_teh"],
                           tgf_second_input=d["tgf_second_input"])
    return DraftConfig(vocab_size=config["corpus"]["vocab_size"],
                       d_model=config["target"]["d_model"], n_heads=d["n_heads"],
                       expansion_dim=d["expansion_dim"], seed=config["seed"] + seed_offset,
                       variant=variant)


def train_config(config: dict) -> TrainConfig:
    t = config["training"]
    return TrainConfig(k=t["k"], steps=t["steps"], lambda_tok=t["lambda_tok"],
                       lambda_feat=t["lambda_feat"], lr=t["lr"],
                       betas=tuple(t["betas"]), grad_clip=t["grad_clip"],
                       epochs=t["epochs"], batch_size=t["batch_size"],
                       warmup_steps=t["warmup_steps"],
                       feature_loss_on=config["draft"]["feature_loss_on"],
                       seed=config["seed"] + 3)


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


def _artifact(out_dir, stage: str) -> Path:
    return Path(out_dir) / ARTIFACTS[stage]


def _require(out_dir, stage: str) -> Path:
    path = _artifact(out_dir, stage)
    if not path.exists():
        raise StageError(stage, f"{path.name} missing — run the {stage} stage first")
    return path


def save_target(target: TargetModel, path, fp: str, loss_history: list[float]) -> None:
    meta = {"format": "specalign-target", "version": 1,
            "config": asdict(target.config),
            "fingerprint": fp, "loss_history": loss_history}
    write_checkpoint(path, meta, [(p.name, p.data) for p in target.parameters()])


def load_target(path) -> tuple[TargetModel, dict]:
    meta, values = read_checkpoint(path)
    if meta.get("format") != "specalign-target":
        raise ValueError(f"{path} is not a target checkpoint")
    target = TargetModel(TargetConfig(**meta["config"]))
    for p in target.parameters():
        p.data[...] = values[p.name]
    target.freeze()
    return target, meta


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_corpus(config: dict, out_dir) -> list[list[int]]:
    corpus = generate_corpus(corpus_config(config))
    payload = {"fingerprint": fingerprint(config), "corpus": corpus}
    _artifact(out_dir, "corpus").write_text(json.dumps(payload))
    return corpus


def load_corpus(out_dir) -> list[list[int]]:
    payload = json.loads(_require(out_dir, "corpus").read_text())
    return payload["corpus"]


def stage_train_target(config: dict, out_dir) -> TargetModel:
    corpus = load_corpus(out_dir)
    target = TargetModel(target_config(config))
    t = config["target"]
    history = target.train_on_corpus(corpus, epochs=t["train_epochs"], lr=t["train_lr"],
                                     batch_size=t["batch_size"], seed=config["seed"] + 7)
    target.freeze()
    save_target(target, _artifact(out_dir, "train-target"), fingerprint(config), history)
    return target


def stage_precompute(config: dict, out_dir) -> FeatureDataset:
    corpus = load_corpus(out_dir)
    target, _ = load_target(_require(out_dir, "train-target"))
    return precompute_features(target, corpus, path=_artifact(out_dir, "precompute"))


def stage_train_draft(config: dict, out_dir) -> DraftModel:
    target, _ = load_target(_require(out_dir, "train-target"))
    dataset = FeatureDataset.load(_require(out_dir, "precompute"))
    draft = make_draft(draft_config(config), target)
    run_schedule(dataset, draft, train_config(config),
                 log_path=Path(out_dir) / "training.jsonl")
    draft.save(_artifact(out_dir, "train-draft"), extra_meta={"fingerprint": fingerprint(config)})
    return draft


def stage_decode(config: dict, out_dir, trace: bool = False) -> dict:
    target, _ = load_target(_require(out_dir, "train-target"))
    draft = DraftModel.load(_require(out_dir, "train-draft"))
    dec = config["decode"]
    prompts = sample_prompts(corpus_config(config), dec["n_prompts"], dec["prompt_len"],
                             seed=config["seed"] + 101)
    rng = np.random.default_rng(config["seed"] + 211)
    taus: list[int] = []
    all_trace: list[dict] = []
    start = time.perf_counter()
    for prompt in prompts:
        result = speculative_generate(
            target, draft, prompt, dec["n_tokens"], mode=dec["mode"],
            temperature=dec["temperature"], rng=rng, depth=dec["depth"],
            budget=dec["budget"], max_depth=dec["max_depth"],
            branch_k=dec["branch_k"], collect_trace=trace)
        taus.extend(m.tau for m in result.metrics)
        if trace and result.trace:
            all_trace.extend(result.trace)
    elapsed = time.perf_counter() - start
    corpus = load_corpus(out_dir)
    curve = misalignment_probe(draft, target, corpus[: min(len(corpus), 40)],
                               forwards=dec["max_depth"])
    hist_values, hist_counts = np.unique(np.asarray(taus), return_counts=True)
    rollout = dec["depth"] if dec["mode"] == "chain" else dec["max_depth"]
    model = LatencyModel(target_ms=config["latency"]["target_ms"],
                         draft_ms=config["latency"]["draft_ms"],
                         depth=rollout, tau=float(np.mean(taus)))
    payload = {
        "fingerprint": fingerprint(config),
        "seed": config["seed"],
        "mean_tau": float(np.mean(taus)),
        "tau_histogram": {int(v): int(c) for v, c in zip(hist_values, hist_counts)},
        "modeled_sr": speedup_ratio(model),
        "rollout_depth": rollout,
        "misalignment": [float(x) for x in curve],
        "n_cycles": len(taus),
        "decode_wall_time_s": elapsed,
        "draft_param_count": draft.param_count(),
    }
    _artifact(out_dir, "decode").write_text(json.dumps(payload, sort_keys=True))
    if trace:
        with open(Path(out_dir) / "trace.jsonl", "w") as fh:
            for record in all_trace:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return payload


@dataclass
class ExperimentReport:
    mean_tau: float
    tau_histogram: dict[int, int]
    misalignment: list[float]
    modeled_sr: float
    config_fingerprint: str
    seed: int
    draft_param_count: int

    def to_dict(self) -> dict:
        return {
            "mean_tau": self.mean_tau,
            "tau_histogram": {str(k): v for k, v in sorted(self.tau_histogram.items())},
            "misalignment": self.misalignment,
            "modeled_sr": self.modeled_sr,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "draft_param_count": self.draft_param_count,
        }


def stage_report(config: dict, out_dir) -> ExperimentReport:
    from . import reporting

    decode_payload = json.loads(_require(out_dir, "decode").read_text())
    report = ExperimentReport(
        mean_tau=decode_payload["mean_tau"],
        tau_histogram={int(k): v for k, v in decode_payload["tau_histogram"].items()},
        misalignment=decode_payload["misalignment"],
        modeled_sr=decode_payload["modeled_sr"],
        config_fingerprint=decode_payload["fingerprint"],
        seed=decode_payload["seed"],
        draft_param_count=decode_payload["draft_param_count"],
    )
    _artifact(out_dir, "report").write_text(json.dumps(report.to_dict(), sort_keys=True))
    reporting.write_misalignment_csv(Path(out_dir) / "misalignment.csv", report.misalignment)
    reporting.render_report_figures(out_dir, report)
    return report


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

_STAGE_FUNCS = {
    "corpus": stage_corpus,
    "train-target": stage_train_target,
    "precompute": stage_precompute,
    "train-draft": stage_train_draft,
    "decode": stage_decode,
    "report": stage_report,
}


def _stage_done(config: dict, out_dir, stage: str) -> bool:
    path = _artifact(out_dir, stage)
    if not path.exists():
        return False
    fp = fingerprint(config)
    try:
        if stage in ("corpus", "decode"):
            return json.loads(path.read_text()).get("fingerprint") == fp
        if stage == "report":
            return json.loads(path.read_text()).get("config_fingerprint") == fp
        if stage == "precompute":
            dataset = FeatureDataset.load(path)
            return (dataset.corpus_hash == corpus_sha256(load_corpus(out_dir))
                    and dataset.config == target_config(config))
        return read_checkpoint(path)[0].get("fingerprint") == fp
    except (OSError, ValueError, KeyError, json.JSONDecodeError, StageError):
        return False


def run_pipeline(config: dict, out_dir, force: bool = False, trace: bool = False):
    """Run every stage, skipping completed ones unless `force`.

    Returns the final ExperimentReport.
    """
    validate_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = None
    for stage in STAGE_ORDER:
        if not force and _stage_done(config, out, stage):
            continue
        func = _STAGE_FUNCS[stage]
        result = func(config, out, trace) if stage == "decode" else func(config, out)
        if stage == "report":
            report = result
    if report is None:
        report = stage_report(config, out)
    return report
