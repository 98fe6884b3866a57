"""End-to-end tests for the command-line pipeline."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from rom_lab.cli import DEFAULT_CONFIG, main
from rom_lab.datagen import DatasetSpec, generate_dataset, write_dataset


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    ds = generate_dataset(DatasetSpec(n_passages=60, n_train_pairs=24, n_eval_queries=12, seed=5))
    paths = write_dataset(ds, root)
    return {k: str(v) for k, v in paths.items()}


@pytest.fixture(scope="module")
def base_config(dataset):
    return {
        "paths": {
            "passages": dataset["passages"],
            "queries_train": dataset["queries_train"],
            "queries_eval": dataset["queries_eval"],
            "pairs": dataset["pairs_train"],
            "judgments": dataset["judgments_eval"],
        },
        "vocab": {"target_size": 600},
        "model": {"layers": 1, "heads": 2, "hidden": 32, "ffn": 64, "max_seq_len": 64},
        "train": {
            "pretrain": {"steps": 8, "batch_size": 8},
            "warmup": {"steps": 4, "batch_size": 4},
            "finetune": {"steps": 6, "batch_size": 8, "lr": 1e-3},
        },
        "search": {"k": 20},
    }


def _write_config(tmp_path: Path, base: dict, **overrides) -> str:
    cfg = json.loads(json.dumps(base))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfigHandling:
    def test_unknown_key_rejected_with_name(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"masking": {"ratee": 0.2}}))
        assert main(["mask-stats", "--config", str(path)]) == 2
        assert "ratee" in capsys.readouterr().err

    def test_unknown_top_level_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"masks": {}}))
        assert main(["mask", "--config", str(path)]) == 2
        assert "masks" in capsys.readouterr().err

    def test_malformed_json_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["mask", "--config", str(path)]) == 2

    def test_missing_config_file_is_missing_input(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["mask", "--config", str(missing)]) == 3
        assert "nope.json" in capsys.readouterr().err

    def test_missing_required_path_field(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"out": str(tmp_path / "out")}))
        assert main(["build-vocab", "--config", str(cfg)]) == 2
        assert "paths.passages" in capsys.readouterr().err

    def test_bad_threads_value(self, tmp_path, base_config, capsys):
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "out"))
        assert main(["build-vocab", "--config", cfg, "--threads", "0"]) == 2

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_defaults_unchanged_by_runs(self, tmp_path, base_config):
        before = json.dumps(DEFAULT_CONFIG, sort_keys=True)
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "out"))
        assert main(["build-vocab", "--config", cfg]) == 0
        assert json.dumps(DEFAULT_CONFIG, sort_keys=True) == before


@pytest.fixture(scope="module")
def out(tmp_path_factory, base_config):
    """Run the stage commands once, in pipeline order, into one directory."""
    root = tmp_path_factory.mktemp("cli-out")
    cfg = _write_config(root, base_config, out=str(root / "out"), seed=7)
    for command in ("build-vocab", "weights"):
        assert main([command, "--config", cfg]) == 0
    for strategy in ("random", "rom"):
        assert main(["mask-stats", "--config", cfg, "--strategy", strategy]) == 0
    for command in ("pretrain", "warmup", "finetune", "encode", "search", "eval"):
        assert main([command, "--config", cfg]) == 0
    return root / "out", cfg


class TestStageCommands:

    def test_artifacts_exist(self, out):
        out_dir, _ = out
        for name in (
            "vocab.json",
            "weights.jsonl",
            "mask_stats_random.json",
            "mask_stats_rom.json",
            "checkpoint-pretrain/header.json",
            "checkpoint-warmup/header.json",
            "checkpoint-finetune/header.json",
            "loss_pretrain.csv",
            "loss_warmup.csv",
            "loss_finetune.csv",
            "index/meta.json",
            "run.trec",
            "metrics.json",
        ):
            assert (out_dir / name).exists(), name

    def test_rom_fraction_below_random(self, out):
        out_dir, _ = out
        random_report = json.loads((out_dir / "mask_stats_random.json").read_text())
        rom_report = json.loads((out_dir / "mask_stats_rom.json").read_text())
        assert rom_report["fraction"] < random_report["fraction"]
        assert random_report["strategy"] == "random"
        assert set(rom_report) == {"strategy", "masked_total", "stop_punct_masked", "fraction"}

    def test_manifest_written_per_command(self, out):
        out_dir, _ = out
        manifest = json.loads((out_dir / "manifest-eval.json").read_text())
        assert manifest["command"] == "eval"
        assert manifest["seed"] == 7
        assert len(manifest["config_sha256"]) == 64
        assert set(manifest["versions"]) == {"rom_lab", "python", "numpy"}
        assert "time" not in json.dumps(manifest).lower()
        # the last mask-stats invocation passed --strategy rom; flags win
        stats_manifest = json.loads((out_dir / "manifest-mask-stats.json").read_text())
        assert stats_manifest["effective_config"]["masking"]["strategy"] == "rom"

    def test_metrics_schema(self, out):
        out_dir, _ = out
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert set(metrics) == {"MRR@10", "R@5", "R@20", "R@100", "R@1000"}
        assert all(0.0 <= v <= 1.0 for v in metrics.values())

    def test_mask_rerun_identical(self, out, tmp_path):
        out_dir, cfg = out
        doc = json.loads(Path(cfg).read_text())
        doc["paths"]["vocab"] = str(out_dir / "vocab.json")
        doc["paths"]["weights"] = str(out_dir / "weights.jsonl")
        redirected = tmp_path / "cfg.json"
        redirected.write_text(json.dumps(doc))
        assert main(["mask", "--config", str(redirected), "--out", str(tmp_path / "a")]) == 0
        assert main(["mask", "--config", str(redirected), "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "masked.jsonl").read_bytes()
        b = (tmp_path / "b" / "masked.jsonl").read_bytes()
        assert a == b

    def test_mask_needs_vocab_and_weights_artifacts(self, out, tmp_path, capsys):
        _, cfg = out
        fresh = tmp_path / "fresh"
        assert main(["mask", "--config", cfg, "--out", str(fresh)]) == 3
        assert "vocab.json" in capsys.readouterr().err

    def test_missing_weights_file_with_rom_names_path(self, out, tmp_path, capsys):
        _, cfg = out
        missing = tmp_path / "nope.jsonl"
        code = main(
            ["mask-stats", "--config", cfg, "--strategy", "rom", "--weights", str(missing)]
        )
        assert code == 3
        err = capsys.readouterr().err
        assert str(missing) in err

    def test_random_strategy_runs_without_weights(self, out, tmp_path):
        _, cfg = out
        code = main(
            [
                "mask-stats",
                "--config",
                cfg,
                "--strategy",
                "random",
                "--weights",
                str(tmp_path / "absent.jsonl"),
            ]
        )
        assert code == 0


class TestFlagOverrides:
    def test_seed_flag_wins(self, tmp_path, base_config):
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "out"), seed=1)
        assert main(["build-vocab", "--config", cfg, "--seed", "99"]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest-build-vocab.json").read_text())
        assert manifest["seed"] == 99

    def test_threads_env_fallback_and_flag_priority(self, tmp_path, base_config, monkeypatch):
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "env"))
        monkeypatch.setenv("ROM_LAB_THREADS", "3")
        assert main(["build-vocab", "--config", cfg]) == 0
        manifest = json.loads((tmp_path / "env" / "manifest-build-vocab.json").read_text())
        assert manifest["effective_config"]["threads"] == 3
        assert main(["build-vocab", "--config", cfg, "--out", str(tmp_path / "f"), "--threads", "2"]) == 0
        manifest = json.loads((tmp_path / "f" / "manifest-build-vocab.json").read_text())
        assert manifest["effective_config"]["threads"] == 2

    def test_bad_env_threads_rejected(self, tmp_path, base_config, monkeypatch, capsys):
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "out"))
        monkeypatch.setenv("ROM_LAB_THREADS", "many")
        assert main(["build-vocab", "--config", cfg]) == 2
        assert "ROM_LAB_THREADS" in capsys.readouterr().err

    def test_strategy_flag_wins_over_config(self, tmp_path, base_config):
        out = tmp_path / "out"
        cfg = _write_config(
            tmp_path, base_config, out=str(out), masking={"strategy": "random"}
        )
        assert main(["build-vocab", "--config", cfg]) == 0
        assert main(["weights", "--config", cfg]) == 0
        assert main(["mask-stats", "--config", cfg, "--strategy", "rom"]) == 0
        assert (out / "mask_stats_rom.json").exists()


class TestCompare:
    def test_reruns_byte_identical_and_inputs_untouched(self, tmp_path, base_config, dataset):
        input_digests = {
            name: hashlib.sha256(Path(path).read_bytes()).hexdigest()
            for name, path in dataset.items()
        }
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "cmp"))
        assert main(["compare", "--config", cfg, "--seed", "7"]) == 0
        first = _tree_digest(tmp_path / "cmp")
        assert main(["compare", "--config", cfg, "--seed", "7"]) == 0
        assert _tree_digest(tmp_path / "cmp") == first
        report = json.loads((tmp_path / "cmp" / "compare_report.json").read_text())
        assert report["seed"] == 7
        assert set(report["strategies"]) == {"random", "rom"}
        for metrics in report["strategies"].values():
            assert "MRR@10" in metrics
        for name, path in dataset.items():
            assert hashlib.sha256(Path(path).read_bytes()).hexdigest() == input_digests[name]

    def test_seed_changes_report(self, tmp_path, base_config):
        cfg = _write_config(tmp_path, base_config, out=str(tmp_path / "a"))
        assert main(["compare", "--config", cfg, "--seed", "7"]) == 0
        assert main(["compare", "--config", cfg, "--seed", "8", "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "rom" / "run.trec").read_bytes()
        b = (tmp_path / "b" / "rom" / "run.trec").read_bytes()
        assert a != b

    def test_compare_with_warmup_stage(self, tmp_path, base_config):
        cfg = _write_config(
            tmp_path, base_config, out=str(tmp_path / "w"), compare={"warmup": True}
        )
        assert main(["compare", "--config", cfg]) == 0
        for strategy in ("random", "rom"):
            assert (tmp_path / "w" / strategy / "checkpoint-warmup" / "header.json").exists()
            assert (tmp_path / "w" / strategy / "loss_warmup.csv").exists()


class TestEntryPoint:
    def test_console_script_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rom_lab", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        for name in ("build-vocab", "mask-stats", "compare"):
            assert name in proc.stdout

    def test_runtime_failure_exits_one(self, tmp_path, base_config, dataset, capsys):
        bad_pairs = tmp_path / "pairs.tsv"
        bad_pairs.write_text("q999\tp00000\n")
        cfg_doc = json.loads(json.dumps(base_config))
        cfg_doc["out"] = str(tmp_path / "out")
        cfg_doc["paths"]["pairs"] = str(bad_pairs)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(cfg_doc))
        assert main(["build-vocab", "--config", str(cfg)]) == 0
        assert main(["weights", "--config", str(cfg)]) == 0
        assert main(["pretrain", "--config", str(cfg)]) == 0
        assert main(["finetune", "--config", str(cfg)]) == 1
        assert "q999" in capsys.readouterr().err
