import csv
import json

import numpy as np
import pytest

from kaf_oneshot.cli import main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def trained_dir(tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--dataset", "synthetic", "--activation", "kaf", "--D", "8",
                 "--epochs", "2", "--seed", "7", "--classes", "4", "--per-class", "8",
                 "--out", str(out)])
    assert code == 0
    return out


class TestTrain:
    def test_smoke_writes_three_artifacts(self, tmp_path, capsys):
        out = tmp_path / "smoke"
        code, _, _ = run(["train", "--dataset", "synthetic", "--activation", "kaf",
                          "--epochs", "2", "--seed", "7", "--classes", "3",
                          "--per-class", "8", "--out", str(out)], capsys)
        assert code == 0
        for name in ("checkpoint.kaf", "loss_curve.csv", "metrics.json"):
            assert (out / name).exists()

    def test_invalid_activation_exits_one_listing_choices(self, tmp_path, capsys):
        code, _, err = run(["train", "--dataset", "synthetic", "--activation", "bogus",
                            "--out", str(tmp_path / "x")], capsys)
        assert code == 1
        assert "relu" in err and "kaf2d" in err

    def test_identical_invocations_byte_identical_outputs(self, tmp_path, capsys):
        argv = ["train", "--dataset", "synthetic", "--activation", "kaf2d", "--D", "6",
                "--epochs", "2", "--seed", "3", "--classes", "4", "--per-class", "8"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(argv + ["--out", str(a)], capsys)[0] == 0
        assert run(argv + ["--out", str(b)], capsys)[0] == 0
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "checkpoint.kaf").read_bytes() == (b / "checkpoint.kaf").read_bytes()

    def test_rerun_into_same_out_is_idempotent(self, trained_dir, capsys):
        before = (trained_dir / "metrics.json").read_bytes()
        code, _, _ = run(["train", "--dataset", "synthetic", "--activation", "kaf",
                          "--D", "8", "--epochs", "2", "--seed", "7", "--classes", "4",
                          "--per-class", "8", "--out", str(trained_dir)], capsys)
        assert code == 0
        assert (trained_dir / "metrics.json").read_bytes() == before

    def test_matching_model_trains(self, tmp_path, capsys):
        out = tmp_path / "match"
        code, _, _ = run(["train", "--model", "matching", "--dataset", "synthetic",
                          "--epochs", "1", "--seed", "2", "--classes", "5",
                          "--per-class", "10", "--out", str(out)], capsys)
        assert code == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert "oneshot_accuracy" in doc["final_metrics"]

    def test_missing_data_dir_is_config_error(self, tmp_path, capsys):
        code, _, err = run(["train", "--dataset", "mnist", "--out", str(tmp_path / "x")], capsys)
        assert code == 1
        assert "data-dir" in err


class TestConfigFile:
    def test_file_values_apply_and_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 2, "seed": 11, "classes": 4, "per_class": 8}))
        out = tmp_path / "run"
        code, _, _ = run(["train", "--dataset", "synthetic", "--config", str(cfg),
                          "--seed", "5", "--out", str(out)], capsys)
        assert code == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["config"]["epochs"] == 2  # from file
        assert doc["seed"] == 5  # flag wins

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        code, _, err = run(["train", "--dataset", "synthetic", "--config", str(cfg),
                            "--out", str(tmp_path / "x")], capsys)
        assert code == 1
        assert "nonsense" in err


class TestEvalAndExports:
    def test_embed_writes_expected_columns(self, trained_dir, tmp_path, capsys):
        out = tmp_path / "emb"
        code, _, _ = run(["embed", "--checkpoint", str(trained_dir / "checkpoint.kaf"),
                          "--dataset", "synthetic", "--classes", "4", "--per-class", "8",
                          "--seed", "7", "--out", str(out)], capsys)
        assert code == 0
        with open(out / "embeddings.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["id", "label", "e0", "e1"]  # 2-dim digit backbone
        assert len(rows) - 1 == 32

    def test_similarity_csv_round_trips(self, trained_dir, tmp_path, capsys):
        out = tmp_path / "sim"
        code, _, _ = run(["similarity", "--checkpoint", str(trained_dir / "checkpoint.kaf"),
                          "--dataset", "synthetic", "--classes", "4", "--per-class", "8",
                          "--batch", "10", "--seed", "1", "--out", str(out)], capsys)
        assert code == 0
        with open(out / "similarity.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["pair_id", "dissimilarity"]
        assert len(rows) - 1 == 10
        assert all(float(r[1]) >= 0 for r in rows[1:])

    def test_eval_silhouette_prints_score_and_counts(self, trained_dir, capsys):
        code, out, _ = run(["eval-silhouette", "--checkpoint", str(trained_dir / "checkpoint.kaf"),
                            "--dataset", "synthetic", "--classes", "4", "--per-class", "8",
                            "--seed", "7"], capsys)
        assert code == 0
        assert "silhouette=" in out and "per_class=" in out

    def test_eval_oneshot_prints_accuracy(self, tmp_path, capsys):
        out = tmp_path / "m"
        assert run(["train", "--model", "matching", "--dataset", "synthetic",
                    "--epochs", "1", "--seed", "2", "--classes", "5", "--per-class", "10",
                    "--out", str(out)], capsys)[0] == 0
        code, text, _ = run(["eval-oneshot", "--checkpoint", str(out / "checkpoint.kaf"),
                             "--dataset", "synthetic", "--classes", "5", "--per-class", "10",
                             "--nway", "5", "--trials", "50"], capsys)
        assert code == 0
        assert "oneshot_accuracy=" in text

    def test_missing_checkpoint_exits_one(self, tmp_path, capsys):
        code, _, err = run(["embed", "--checkpoint", str(tmp_path / "absent.kaf"),
                            "--dataset", "synthetic", "--out", str(tmp_path / "o")], capsys)
        assert code == 1


class TestChecks:
    def test_gradcheck_passes(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "2"], capsys)
        assert code == 0
        assert "conv2d" in out and "kaf2d" in out and "ok" in out

    def test_gradcheck_corruption_hook_exits_three(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "1", "--corrupt", "linear"], capsys)
        assert code == 3
        assert "FAIL" in out

    def test_gradcheck_seed_flag_plumbs(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "1"], capsys)
        assert code == 0
        assert "(1 seeds" in out

    def test_psdcheck_default_sizes(self, capsys):
        code, out, _ = run(["psdcheck"], capsys)
        assert code == 0
        assert out.count("lambda_min=") == 4

    def test_psdcheck_d_one_gram_is_unit(self, capsys):
        code, out, _ = run(["psdcheck", "--D", "1"], capsys)
        assert code == 0
        assert "+1.000000e+00" in out

    def test_psdcheck_invalid_list_exits_one(self, capsys):
        code, _, err = run(["psdcheck", "--D", "2,zebra"], capsys)
        assert code == 1


@pytest.mark.parametrize("command", [
    ["train"], ["eval-silhouette"], ["eval-oneshot"], ["embed"],
    ["similarity"], ["gradcheck"], ["psdcheck"],
])
def test_every_command_help_exits_zero(command, capsys):
    assert main(command + ["--help"]) == 0
    out = capsys.readouterr().out
    assert "default" in out or "usage" in out
