"""Harness: config validation, pipeline stages and resume, ablation, CLI."""

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from specalign.ablation import apply_setting, run_ablation
from specalign.cli import main as cli_main
from specalign.config import ConfigError, fingerprint, load_config, validate_config
from specalign.pipeline import (
    StageError,
    run_pipeline,
    stage_corpus,
    stage_decode,
    stage_precompute,
    stage_report,
    stage_train_draft,
    stage_train_target,
)


def fast_config(**decode_overrides) -> dict:
    """A pipeline config small enough for test runs (seconds, not minutes)."""
    config = load_config("toy")
    config["corpus"].update({"vocab_size": 12, "n_sequences": 16, "seq_len": 20})
    config["target"].update({"d_model": 16, "n_layers": 1, "n_heads": 2,
                             "max_seq": 64, "train_epochs": 1})
    config["training"].update({"epochs": 1, "steps": 2})
    config["decode"].update({"mode": "chain", "depth": 3, "budget": 8, "max_depth": 3,
                             "n_prompts": 2, "prompt_len": 5, "n_tokens": 10})
    config["decode"].update(decode_overrides)
    validate_config(config)
    return config


class TestConfig:
    def test_presets_validate(self):
        for preset in ("toy", "paper-faithful"):
            load_config(preset)

    def test_paper_faithful_carries_published_optimizer(self):
        cfg = load_config("paper-faithful")
        assert cfg["training"]["lr"] == 3e-5
        assert cfg["training"]["epochs"] == 20
        assert cfg["training"]["warmup_steps"] == 2000
        assert cfg["training"]["batch_size"] == 4
        assert cfg["training"]["k"] == 3 and cfg["training"]["steps"] == 3
        assert cfg["decode"]["budget"] == 60 and cfg["decode"]["max_depth"] == 6

    def test_error_names_key_path(self):
        config = load_config("toy")
        config["decode"]["mode"] = "warp"
        with pytest.raises(ConfigError, match=r"decode\.mode"):
            validate_config(config)
        config = load_config("toy")
        del config["training"]["k"]
        with pytest.raises(ConfigError, match=r"training\.k"):
            validate_config(config)
        config = load_config("toy")
        config["corpus"]["vocab_size"] = "many"
        with pytest.raises(ConfigError, match=r"corpus\.vocab_size"):
            validate_config(config)

    def test_unknown_key_rejected(self):
        config = load_config("toy")
        config["decode"]["definitely_not_a_key"] = 1
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config(config)

    def test_seq_room_guard(self):
        config = load_config("toy")
        config["target"]["max_seq"] = 16
        with pytest.raises(ConfigError, match=r"max_seq"):
            validate_config(config)

    def test_overlay_and_seed(self, tmp_path):
        overlay = tmp_path / "o.json"
        overlay.write_text(json.dumps({"training": {"k": 5}}))
        config = load_config("toy", config_path=overlay, seed=99)
        assert config["training"]["k"] == 5 and config["seed"] == 99

    def test_fingerprint_stable_and_sensitive(self):
        a, b = load_config("toy"), load_config("toy")
        assert fingerprint(a) == fingerprint(b)
        b["training"]["k"] = 7
        assert fingerprint(a) != fingerprint(b)


class TestPipeline:
    def test_stages_require_inputs(self, tmp_path):
        config = fast_config()
        with pytest.raises(StageError) as err:
            stage_train_target(config, tmp_path)
        assert err.value.stage == "corpus"
        stage_corpus(config, tmp_path)
        with pytest.raises(StageError) as err:
            stage_train_draft(config, tmp_path)
        assert err.value.stage in ("train-target", "precompute")
        stage_train_target(config, tmp_path)
        with pytest.raises(StageError, match="precompute") as err:
            stage_train_draft(config, tmp_path)
        assert err.value.stage == "precompute"

    def test_full_pipeline_and_artifacts(self, tmp_path):
        config = fast_config()
        report = run_pipeline(config, tmp_path)
        for name in ("corpus.json", "target.ckpt", "dataset.bin", "draft.ckpt",
                     "training.jsonl", "decode.json", "report.json",
                     "misalignment.csv", "misalignment.png", "tau_histogram.png",
                     "training_loss.png"):
            assert (tmp_path / name).exists(), name
        assert report.mean_tau >= 1.0
        assert report.config_fingerprint == fingerprint(config)
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["mean_tau"] == report.mean_tau

    def test_rerun_reuses_and_reproduces(self, tmp_path):
        config = fast_config()
        first = run_pipeline(config, tmp_path)
        before = (tmp_path / "report.json").read_bytes()
        target_mtime = (tmp_path / "target.ckpt").stat().st_mtime_ns
        second = run_pipeline(config, tmp_path)
        assert (tmp_path / "target.ckpt").stat().st_mtime_ns == target_mtime
        assert (tmp_path / "report.json").read_bytes() == before
        assert first.mean_tau == second.mean_tau

    def test_fresh_rerun_is_bit_identical(self, tmp_path):
        config = fast_config()
        run_pipeline(config, tmp_path / "a")
        run_pipeline(config, tmp_path / "b")
        assert ((tmp_path / "a" / "report.json").read_bytes()
                == (tmp_path / "b" / "report.json").read_bytes())

    def test_config_change_triggers_rerun(self, tmp_path):
        config = fast_config()
        run_pipeline(config, tmp_path)
        changed = copy.deepcopy(config)
        changed["training"]["steps"] = 1
        report = run_pipeline(changed, tmp_path)
        assert report.config_fingerprint == fingerprint(changed)

    def test_decode_trace_written(self, tmp_path):
        config = fast_config()
        stage_corpus(config, tmp_path)
        stage_train_target(config, tmp_path)
        stage_precompute(config, tmp_path)
        stage_train_draft(config, tmp_path)
        stage_decode(config, tmp_path, trace=True)
        lines = (tmp_path / "trace.jsonl").read_text().splitlines()
        assert lines
        record = json.loads(lines[0])
        assert {"cycle", "accepted", "bonus", "tau"} <= set(record)

    def test_misalignment_csv_shape(self, tmp_path):
        config = fast_config()
        run_pipeline(config, tmp_path)
        rows = (tmp_path / "misalignment.csv").read_text().splitlines()
        assert rows[0] == "forward_index,misalignment_rate"
        assert len(rows) == 1 + config["decode"]["max_depth"]

    def test_default_preset_completes_within_budget(self, tmp_path):
        """The shipped toy preset runs end-to-end on one core; the 10-minute
        target is enforced here at a relaxed bound."""
        import time

        config = load_config("toy")
        start = time.perf_counter()
        report = run_pipeline(config, tmp_path)
        elapsed = time.perf_counter() - start
        assert elapsed < 480, f"pipeline took {elapsed:.0f}s"
        assert report.mean_tau > 1.0
        assert (tmp_path / "report.json").exists()


class TestAblation:
    def test_apply_setting_changes_only_swept_key(self):
        base = fast_config()
        for axis, value, path in [
            ("topk", None, ("training", "k")),
            ("steps", 1, ("training", "steps")),
            ("teh", False, ("draft", "use_teh")),
            ("expansion_dim", 32, ("draft", "expansion_dim")),
            ("tgf_variant", "raw_feature", ("draft", "tgf_second_input")),
        ]:
            cell = apply_setting(base, axis, value)
            section, key = path
            assert cell[section][key] == value
            cell[section][key] = base[section][key]
            assert cell == base, f"{axis} changed more than {path}"

    def test_tgf_off_setting(self):
        cell = apply_setting(fast_config(), "tgf_variant", "off")
        assert cell["draft"]["use_tgf"] is False

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            apply_setting(fast_config(), "dropout", [0.1])

    def test_topk_sweep_with_na_sentinel(self, tmp_path):
        rows = run_ablation("topk", [None, 3], fast_config(), tmp_path, workers=2)
        assert [r["setting"] for r in rows] == ["NA", "3"]
        for row in rows:
            assert row["mean_tau"] >= 1.0 and row["modeled_sr"] > 0
        csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert len(csv_lines) == 3
        assert (tmp_path / "ablation_topk.png").exists()

    def test_expansion_dim_param_delta(self, tmp_path):
        d = 16
        rows = run_ablation("expansion_dim", [d, 4 * d], fast_config(), tmp_path,
                            workers=2)
        delta = rows[1]["param_count"] - rows[0]["param_count"]
        expected = 2 * d * (3 * d) + (3 * d) + (3 * d) * d
        assert delta == expected


class TestCli:
    def test_latency_verb(self, capsys):
        assert cli_main(["latency", "--tau", "5", "--target-ms", "25",
                         "--draft-ms", "1.5", "--depth", "6"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["speedup_ratio"] - 3.68) <= 0.005

    def test_stage_error_is_machine_readable(self, tmp_path, capsys):
        code = cli_main(["decode", "--out", str(tmp_path)])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "stage-error"
        assert err["error"]["stage"]

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"decode": {"mode": "warp"}}))
        code = cli_main(["corpus", "--config", str(bad), "--out", str(tmp_path)])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert "decode.mode" in err["error"]["message"]

    def test_stage_verbs_end_to_end(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "corpus": {"vocab_size": 12, "n_sequences": 12, "seq_len": 18},
            "target": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_seq": 64,
                       "train_epochs": 1},
            "training": {"epochs": 1, "steps": 1},
            "decode": {"mode": "chain", "depth": 3, "n_prompts": 1,
                       "prompt_len": 5, "n_tokens": 8},
        }))
        out = str(tmp_path / "run")
        for verb in ("corpus", "train-target", "precompute", "train-draft",
                     "decode", "report"):
            code = cli_main([verb, "--config", str(cfg_path), "--out", out])
            assert code == 0, verb
            capsys.readouterr()
        assert (Path(out) / "report.json").exists()
        assert (Path(out) / "misalignment.csv").exists()
        assert (Path(out) / "misalignment.png").exists()
