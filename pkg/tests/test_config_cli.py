import hashlib
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from stars.cli import main
from stars.config import ConfigError, apply_overrides, load_config

TINY = {
    "data": {"target_length": 8},
    "model": {"embed_dim": 8, "encoder_layers": 2, "decoder_layers": 1, "heads": 2, "ffn_hidden": 16,
              "predictor_hidden": 16, "joints": 2, "max_segments": 2},
    "stage1": {"epochs": 2, "batch_size": 4},
    "stage2": {"epochs": 1, "batch_size": 4, "queue_size": 8},
    "eval": {"probe_epochs": 3},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    lines = [json.loads(line) for line in out.out.splitlines() if line.strip()]
    return code, (lines[-1] if lines else None), out.err


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def workspace(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    code, _, _ = run(capsys, "gen-synth", "--classes", 2, "--per-class", 6, "--frames", 16, "--joints", 2,
                     "--test-per-class", 2, "--out", tmp_path / "d")
    assert code == 0
    return tmp_path, cfg


class TestConfig:
    def test_defaults(self):
        cfg = load_config(env={})
        assert cfg.model.embed_dim == 256 and cfg.stage2.tau2 == 0.07 and cfg.stage2.queue_size == 8192
        assert cfg.stage1.mask_ratio == 0.9 and cfg.stage1.tau1 == 0.1

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"stage2": {"temperature": 0.1}}))
        with pytest.raises(ConfigError, match="temperature"):
            load_config(p, env={})
        with pytest.raises(ConfigError, match="top-level"):
            load_config(None, ["bogus.x=1"], env={})

    def test_section_seed_rejected(self):
        with pytest.raises(ConfigError, match="seed"):
            load_config(None, ["stage1.seed=3"], env={})

    def test_override_parsing(self):
        cfg = load_config(None, ["stage2.tau2=0.1", "stage2.mode=three_stage", "stage1.betas=[0.8,0.9]"], env={})
        assert cfg.stage2.tau2 == 0.1 and cfg.stage2.mode == "three_stage" and cfg.stage1.betas == (0.8, 0.9)

    def test_override_malformed(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides({}, ["stage2.tau2"])

    def test_env_seed(self):
        cfg = load_config(None, ["seed=3"], env={"STARS_SEED": "11"})
        assert cfg.seed == cfg.stage1.seed == cfg.stage2.seed == 11
        with pytest.raises(ConfigError, match="STARS_SEED"):
            load_config(env={"STARS_SEED": "x"})

    def test_validation_before_work(self):
        with pytest.raises(ConfigError, match="mask_ratio"):
            load_config(None, ["stage1.mask_ratio=1.5"], env={})
        with pytest.raises(ConfigError, match="max_segments"):
            load_config(None, ["data.target_length=160"], env={})

    def test_round_trip(self, tmp_path):
        cfg = load_config(None, ["seed=5", "stage2.epochs=3"], env={})
        p = tmp_path / "r.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert load_config(p, env={}) == cfg


class TestCLI:
    def test_gen_synth_count_contract(self, tmp_path, capsys):
        code, rec, _ = run(capsys, "gen-synth", "--classes", 5, "--per-class", 20, "--frames", 120, "--joints", 25,
                           "--seed", 7, "--out", tmp_path / "d")
        assert code == 0
        assert rec == {"classes": 5, "per_class": 20, "frames": 120, "joints": 25, "seed": 7,
                       "test_per_class": 0, "out": str(tmp_path / "d")}
        assert len(list((tmp_path / "d").glob("*.skl"))) == 100
        assert len((tmp_path / "d" / "manifest.jsonl").read_text().splitlines()) == 100

    def test_gen_synth_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "gen-synth", "--classes", 3, "--per-class", 4, "--frames", 12, "--joints", 3,
                "--seed", 2, "--out", tmp_path / name)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_gen_synth_one_class(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-synth", "--classes", 1, "--out", tmp_path / "d")
        assert code == 2 and "usage" in err

    def test_missing_config(self, workspace, capsys):
        root, _ = workspace
        code, _, err = run(capsys, "pretrain", "--config", root / "nope.json", "--data", root / "d",
                           "--out", root / "ck")
        assert code == 2 and "not found" in err

    def test_bad_mode(self, workspace):
        root, cfg = workspace
        with pytest.raises(SystemExit) as info:
            main(["tune", "--config", str(cfg), "--data", str(root / "d"), "--init", "x", "--mode", "nonsense",
                  "--out", str(root / "o")])
        assert info.value.code == 2

    def test_pipeline(self, workspace, capsys):
        root, cfg = workspace
        d = root / "d"
        code, rec, _ = run(capsys, "pretrain", "--config", cfg, "--data", d, "--split", "holdout",
                           "--out", root / "ck1", "--plot")
        assert code == 0 and rec["stage"] == "mamp"
        assert (root / "ck1/params.bin").exists() and (root / "ck1/train_log.svg").exists()

        code, rec, err = run(capsys, "-v", "tune", "--config", cfg, "--data", d, "--split", "holdout",
                             "--init", root / "ck1", "--mode", "three-stage", "--head-epochs", 1,
                             "--out", root / "ck2")
        assert code == 0 and rec["stage"] == "stars" and rec["mode"] == "three_stage"
        phases = [json.loads(line)["phase"] for line in (root / "ck2/train_log.jsonl").read_text().splitlines()]
        assert phases == ["head_init", "tune"]
        assert err.index("head initialisation") < err.index("contrastive tuning")

        for part in ("train", "test"):
            code, rec, _ = run(capsys, "extract", "--data", d, "--split", "holdout", "--part", part,
                               "--ckpt", root / "ck2", "--out", root / f"{part}.fts")
            assert code == 0
        assert rec["rows"] == 4 and rec["dim"] == 8

        fts = ["--train", root / "train.fts", "--test", root / "test.fts"]
        code, knn, _ = run(capsys, "eval", "knn", *fts, "--k", 1)
        assert code == 0 and set(knn) == {"protocol", "k_or_n", "accuracy", "train_size", "test_size"}
        code, few, _ = run(capsys, "eval", "fewshot", *fts, "--n", 1)
        assert code == 0 and few["protocol"] == "fewshot" and few["train_size"] == 2  # first exemplar per class
        code, lin, _ = run(capsys, "eval", "linear", *fts, "--config", cfg, "--plot", root / "probe.svg")
        assert code == 0 and lin["protocol"] == "linear" and (root / "probe.svg").exists()

        code, rec, _ = run(capsys, "plot", "--log", root / "ck1/train_log.jsonl", "--log",
                           root / "ck2/train_log.jsonl", "--out", root / "curves.svg")
        assert code == 0 and (root / "curves.svg").read_text().startswith("<?xml")

    def test_fewshot_one_equals_knn_one(self, workspace, capsys):
        root, cfg = workspace
        run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--out", root / "ck1")
        run(capsys, "extract", "--data", root / "d", "--ckpt", root / "ck1", "--out", root / "all.fts")
        # one row per class, so the exemplar set is the whole training file
        from stars.evaluation import FeatureSet, read_features, select_exemplars, write_features
        ex = select_exemplars(read_features(root / "all.fts"), 1)
        write_features(root / "ex.fts", ex)
        files = ["--train", root / "ex.fts", "--test", root / "all.fts"]
        _, knn, _ = run(capsys, "eval", "knn", *files, "--k", 1)
        _, few, _ = run(capsys, "eval", "fewshot", *files, "--n", 1)
        assert few == {**knn, "protocol": "fewshot"}

    def test_zero_epochs_is_fresh_init(self, workspace, capsys):
        root, cfg = workspace
        for name, extra in (("a", ["--set", "stage1.epochs=0"]), ("b", ["--set", "stage1.epochs=0"])):
            run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--out", root / name, *extra)
        import torch
        from stars.model import ModelConfig, StarsModel, load_checkpoint
        torch.manual_seed(0)
        fresh = StarsModel(ModelConfig(**TINY["model"]))
        loaded = load_checkpoint(root / "a")[0]
        for k, v in fresh.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k]), k

    def test_dim_mismatch_exit_1(self, tmp_path, capsys):
        import numpy as np
        from stars.evaluation import FeatureSet, write_features
        write_features(tmp_path / "a.fts", FeatureSet(np.zeros((2, 3), np.float32), [0, 1]))
        write_features(tmp_path / "b.fts", FeatureSet(np.zeros((2, 4), np.float32), [0, 1]))
        code, rec, _ = run(capsys, "eval", "knn", "--train", tmp_path / "a.fts", "--test", tmp_path / "b.fts")
        assert code == 1 and "dims" in rec["error"]

    def test_checkpoint_config_mismatch_exit_1(self, workspace, capsys):
        root, cfg = workspace
        run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--out", root / "ck1")
        other = root / "other.json"
        other.write_text(json.dumps({**TINY, "model": {**TINY["model"], "embed_dim": 16}}))
        code, rec, _ = run(capsys, "tune", "--config", other, "--data", root / "d", "--init", root / "ck1",
                           "--out", root / "ck2")
        assert code == 1 and "does not match" in rec["error"]

    def test_training_abort_exit_1(self, workspace, capsys):
        root, cfg = workspace
        code, rec, _ = run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--out", root / "ck",
                           "--set", "stage1.lr=1e30", "--set", "stage1.epochs=5")
        assert code == 1 and {"batch", "lr", "grad_norm"} <= set(rec)

    def test_env_seed_changes_init(self, workspace, capsys, monkeypatch):
        root, cfg = workspace
        hashes = []
        for seed in ("1", "1", "2"):
            monkeypatch.setenv("STARS_SEED", seed)
            _, rec, _ = run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--out", root / f"s{seed}")
            hashes.append(rec["hash"])
        assert hashes[0] == hashes[1] != hashes[2]

    def test_unknown_split_is_usage_error(self, workspace, capsys):
        root, cfg = workspace
        code, _, err = run(capsys, "pretrain", "--config", cfg, "--data", root / "d", "--split", "xyz",
                           "--out", root / "ck")
        assert code == 2 and "no split" in err


@pytest.mark.skipif(shutil.which("stars") is None, reason="console script not installed")
def test_console_script_json_on_stdout(tmp_path):
    proc = subprocess.run(["stars", "gen-synth", "--classes", "2", "--per-class", "2", "--frames", "8",
                           "--joints", "2", "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["classes"] == 2
