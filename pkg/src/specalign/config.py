"""Experiment configuration: one versioned JSON document, validated with
key-path error messages, plus the two shipped presets.

Schema (all keys required; `specalign <verb> --config` overlays a preset):

    version   int, currently 1
    seed      int
    corpus    vocab_size, n_sequences, seq_len, kind, peak, n_alternatives
    target    d_model, n_layers, n_heads, max_seq, train_epochs, train_lr,
              batch_size
    draft     n_heads, expansion_dim (null -> 4*d_model), use_tgf, use_teh,
              tgf_second_input, feature_loss_on
    training  k (int or null for no masking), steps, lambda_tok, lambda_feat,
              lr, betas, grad_clip, epochs, batch_size, warmup_steps
    decode    mode, temperature, depth, budget, max_depth, branch_k,
              n_prompts, prompt_len, n_tokens
    latency   target_ms, draft_ms
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for schema violations; the message names the offending key path."""


TOY_PRESET: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "corpus": {
        "vocab_size": 64,
        "n_sequences": 200,
        "seq_len": 48,
        "kind": "markov",
        "peak": 0.72,
        "n_alternatives": 3,
    },
    "target": {
        "d_model": 32,
        "n_layers": 4,
        "n_heads": 4,
        "max_seq": 192,
        "train_epochs": 5,
        "train_lr": 3e-3,
        "batch_size": 16,
    },
    "draft": {
        "n_heads": 4,
        "expansion_dim": None,
        "use_tgf": True,
        "use_teh": True,
        "tgf_second_input": "token_embedding",
        "feature_loss_on": "regress",
    },
    "training": {
        "k": 3,
        "steps": 3,
        "lambda_tok": 1.0,
        "lambda_feat": 0.1,
        "lr": 1e-3,
        "betas": [0.9, 0.95],
        "grad_clip": 0.5,
        "epochs": 4,
        "batch_size": 4,
        "warmup_steps": 0,
    },
    "decode": {
        "mode": "tree",
        "temperature": 0.0,
        "depth": 6,
        "budget": 60,
        "max_depth": 6,
        "branch_k": 3,
        "n_prompts": 20,
        "prompt_len": 10,
        "n_tokens": 48,
    },
    "latency": {
        "target_ms": 25.0,
        "draft_ms": 1.5,
    },
}

# Published hyperparameters kept verbatim (optimizer, schedule, tree shape);
# model dimensions stay at desk scale since large LLMs are out of scope.
PAPER_FAITHFUL_PRESET: dict = copy.deepcopy(TOY_PRESET)
PAPER_FAITHFUL_PRESET["training"].update({
    "lr": 3e-5,
    "epochs": 20,
    "batch_size": 4,
    "warmup_steps": 2000,
})

PRESETS = {"toy": TOY_PRESET, "paper-faithful": PAPER_FAITHFUL_PRESET}

_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "corpus": {
        "vocab_size": int, "n_sequences": int, "seq_len": int, "kind": str,
        "peak": (int, float), "n_alternatives": int,
    },
    "target": {
        "d_model": int, "n_layers": int, "n_heads": int, "max_seq": int,
        "train_epochs": int, "train_lr": (int, float), "batch_size": int,
    },
    "draft": {
        "n_heads": int, "expansion_dim": (int, type(None)), "use_tgf": bool,
        "use_teh": bool, "tgf_second_input": str, "feature_loss_on": str,
    },
    "training": {
        "k": (int, type(None)), "steps": int, "lambda_tok": (int, float),
        "lambda_feat": (int, float), "lr": (int, float), "betas": list,
        "grad_clip": (int, float), "epochs": int, "batch_size": int,
        "warmup_steps": int,
    },
    "decode": {
        "mode": str, "temperature": (int, float), "depth": int, "budget": int,
        "max_depth": int, "branch_k": int, "n_prompts": int, "prompt_len": int,
        "n_tokens": int,
    },
    "latency": {
        "target_ms": (int, float), "draft_ms": (int, float),
    },
}


def validate_config(config: dict) -> None:
    if not isinstance(config, dict):
        raise ConfigError("config: must be a JSON object")
    if config.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {config.get('version')!r}")
    if not isinstance(config.get("seed"), int) or isinstance(config.get("seed"), bool):
        raise ConfigError("seed: must be an integer")
    for section, fields in _SCHEMA.items():
        block = config.get(section)
        if not isinstance(block, dict):
            raise ConfigError(f"{section}: missing or not an object")
        for key, types in fields.items():
            if key not in block:
                raise ConfigError(f"{section}.{key}: missing")
            value = block[key]
            if isinstance(value, bool) and types is not bool and bool not in (
                    types if isinstance(types, tuple) else (types,)):
                raise ConfigError(f"{section}.{key}: must not be a boolean")
            if not isinstance(value, types):
                raise ConfigError(f"{section}.{key}: wrong type {type(value).__name__}")
        unknown = set(block) - set(fields)
        if unknown:
            raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown key")
    _validate_values(config)


def _validate_values(config: dict) -> None:
    dec, tr, cor, tgt = config["decode"], config["training"], config["corpus"], config["target"]
    if dec["mode"] not in ("chain", "tree"):
        raise ConfigError("decode.mode: must be chain|tree")
    if dec["temperature"] < 0:
        raise ConfigError("decode.temperature: must be >= 0")
    for key in ("depth", "budget", "max_depth", "branch_k", "n_prompts", "prompt_len", "n_tokens"):
        if dec[key] < 1:
            raise ConfigError(f"decode.{key}: must be >= 1")
    if tr["steps"] < 1:
        raise ConfigError("training.steps: must be >= 1")
    if tr["k"] is not None and tr["k"] < 1:
        raise ConfigError("training.k: must be >= 1 or null")
    if len(tr["betas"]) != 2:
        raise ConfigError("training.betas: must be a pair")
    if config["draft"]["tgf_second_input"] not in ("token_embedding", "raw_feature", "fused_h"):
        raise ConfigError("draft.tgf_second_input: must be token_embedding|raw_feature|fused_h")
    if config["draft"]["feature_loss_on"] not in ("regress", "predict", "both"):
        raise ConfigError("draft.feature_loss_on: must be regress|predict|both")
    if cor["vocab_size"] < 2:
        raise ConfigError("corpus.vocab_size: must be >= 2")
    if tgt["d_model"] % tgt["n_heads"] != 0:
        raise ConfigError("target.d_model: must be divisible by target.n_heads")
    room = dec["depth"] if dec["mode"] == "chain" else dec["budget"]
    if dec["prompt_len"] + dec["n_tokens"] + room + 1 > tgt["max_seq"]:
        raise ConfigError("target.max_seq: too small for decode prompt_len + n_tokens + draft room")
    if config["latency"]["target_ms"] <= 0 or config["latency"]["draft_ms"] < 0:
        raise ConfigError("latency.target_ms: latencies must be positive")


def load_config(preset: str = "toy", config_path=None, seed: int | None = None) -> dict:
    """Preset overlaid with an optional JSON file, then an optional seed."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    config = copy.deepcopy(PRESETS[preset])
    if config_path is not None:
        try:
            overlay = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {config_path}: {exc}") from exc
        _merge(config, overlay)
    if seed is not None:
        config["seed"] = int(seed)
    validate_config(config)
    return config


def _merge(base: dict, overlay: dict) -> None:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def fingerprint(config: dict) -> str:
    """Stable hash of the full config document."""
    payload = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
