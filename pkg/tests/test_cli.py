import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from sertk.cli import load_run_config, main

ROOT = Path(__file__).resolve().parents[1]
TINY_MODEL = {"image_size": 224, "patch_size": 16, "embed_dim": 16, "heads": 2, "depth": 1, "mlp_dim": 16}


@pytest.fixture
def tiny(tmp_path, participant):
    """Run config with a one-block model; returns (config path, manifest path)."""
    path, _ = participant
    cfg = {"seed": 3, "model": TINY_MODEL, "train": {"learning_rate": 1e-3, "epochs": 1, "batch_size": 8},
           "paths": {"report_dir": "reports", "cache_dir": "cache", "checkpoint_dir": "ckpt"}}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return str(tmp_path / "run.json"), str(path)


def reports(d):
    return sorted(Path(d).glob("*.json"))


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert main(["flops", "--frobnicate"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == 2

    def test_bad_model_name(self, capsys, tmp_path):
        assert main(["flops", "--model", "resnet", "--report-dir", str(tmp_path)]) == 2

    def test_missing_manifest_is_usage_error(self, tmp_path):
        assert main(["prep", "--report-dir", str(tmp_path)]) == 2

    def test_domain_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("clip_path,emotion\nx.wav,bored\n")
        assert main(["prep", "--manifest", str(bad), "--report-dir", str(tmp_path)]) == 1
        assert main(["eval", "--model", str(tmp_path / "nope.ckpt"), "--manifest", str(bad),
                     "--report-dir", str(tmp_path)]) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"sed": 1}')
        with pytest.raises(ValueError):
            load_run_config(str(tmp_path / "c.json"))

    def test_console_script(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "sertk.cli", "flops", "--config", str(ROOT / "configs/vit-base.json"),
                              "--report-dir", str(tmp_path)], capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        value = float(out.stdout.splitlines()[0].split()[0])
        assert abs(value - 16.87) / 16.87 <= 0.02


class TestCommands:
    def test_flops_report(self, tmp_path, capsys):
        assert main(["flops", "--model", "vit-base", "--mode", "total_mac", "--report-dir", str(tmp_path)]) == 0
        doc = json.loads(reports(tmp_path)[0].read_text())
        assert doc["subcommand"] == "flops" and doc["result"]["mode"] == "total_mac"
        assert doc["config"]["model"]["embed_dim"] == 768
        assert reports(tmp_path)[0].name.startswith("flops-0-")

    def test_prep_cache(self, tiny, capsys):
        cfg, manifest = tiny
        assert main(["prep", "--config", cfg, "--manifest", manifest]) == 0
        assert main(["prep", "--config", cfg, "--manifest", manifest]) == 0
        docs = [json.loads(p.read_text()) for p in reports(Path(cfg).parent / "reports")]
        assert sorted(d["result"]["cache_hits"] for d in docs) == [0, 40]

    def test_personalize_byte_identical(self, tiny, tmp_path):
        cfg, manifest = tiny
        for name in ("a", "b"):
            assert main(["personalize", "--config", cfg, "--manifest", manifest, "--no-timing",
                         "--report-dir", str(tmp_path / "same")]) == 0
        a, b = reports(tmp_path / "same")
        assert a.name != b.name and a.read_bytes() == b.read_bytes()
        result = json.loads(a.read_text())["result"]
        assert result["n_samples"] == 16 and result["mean_inference_ms"] is None

    def test_train_eval_ensemble(self, tiny, tmp_path, capsys):
        cfg, manifest = tiny
        base = Path(cfg).parent
        assert main(["train", "--config", cfg, "--manifest", manifest]) == 0
        ckpt = base / "ckpt" / "participant.ckpt"
        assert ckpt.exists() and (base / "ckpt" / "participant.trace.jsonl").exists()
        assert main(["train-mix", "--config", cfg, "--manifest", manifest]) == 0
        assert main(["eval", "--config", cfg, "--model", str(ckpt), "--manifest", manifest, "--no-timing"]) == 0
        spec = tmp_path / "ens" / "spec.json"
        assert main(["ensemble", "--config", cfg, "--members", str(ckpt), str(base / "ckpt" / "mix.ckpt"),
                     "--out", str(spec)]) == 0
        assert main(["ensemble", "--config", cfg, "--spec", str(spec), "--manifest", manifest, "--no-timing"]) == 0
        doc = json.loads(reports(base / "reports")[-1].read_text())
        kinds = {json.loads(p.read_text())["subcommand"] for p in reports(base / "reports")}
        assert kinds == {"train", "train-mix", "eval", "ensemble"}
        assert main(["flops", "--config", cfg, "--model", str(spec)]) == 0
        assert main(["bench", "--config", cfg, "--model", str(spec), "--n-samples", "1", "--reps", "3"]) == 0
        assert doc["result"] is not None

    def test_kfold(self, tiny, capsys):
        cfg, manifest = tiny
        assert main(["kfold", "--config", cfg, "--manifest", manifest]) == 0
        doc = json.loads(reports(Path(cfg).parent / "reports")[0].read_text())
        assert len(doc["result"]["folds"]) == 5

    def test_bench(self, tiny, capsys):
        cfg, _ = tiny
        assert main(["bench", "--config", cfg, "--n-samples", "2", "--reps", "3"]) == 0
        assert "ms/sample" in capsys.readouterr().out
        assert main(["bench", "--config", cfg, "--reps", "2"]) == 1


def test_configs_load():
    for name in os.listdir(ROOT / "configs"):
        load_run_config(str(ROOT / "configs" / name))
