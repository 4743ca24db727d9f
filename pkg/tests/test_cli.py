import json
import shutil
import subprocess
import sys

import pytest

from nodulenet.cli import main

from fixtures import write_prep_fixture


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--out", str(out), "--n", "12", "--seed", "3"]) == 0
    return out


class TestSynth:
    def test_counts(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", tmp_path / "ds", "--n", 200, "--malignant-frac", 0.5,
                           "--seed", 42)
        assert code == 0
        index = json.loads((tmp_path / "ds" / "index.json").read_text())
        assert index["class_counts"] == {"benign": 100, "malignant": 100}
        assert json.loads(out)["count"] == 200

    def test_rerun_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "synth", "--out", tmp_path / name, "--n", 6, "--seed", 1)[0] == 0
        files = sorted(p.name for p in (tmp_path / "a" / "patches").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b" / "patches").iterdir())
        for f in files:
            assert (tmp_path / "a" / "patches" / f).read_bytes() == (tmp_path / "b" / "patches" / f).read_bytes()
        assert (tmp_path / "a" / "index.json").read_bytes() == (tmp_path / "b" / "index.json").read_bytes()

    def test_single_sample_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "ds", "--n", 1)
        assert code == 2
        assert error_line(err)["exit_code"] == 2

    def test_bad_flag(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "ds", "--n", "many")
        assert code == 2 and "error" in error_line(err)

    def test_unwritable_output_is_runtime_error(self, tmp_path, capsys):
        (tmp_path / "file").write_text("x")
        code, _, err = run(capsys, "synth", "--out", tmp_path / "file" / "ds", "--n", 4)
        assert code == 1 and error_line(err)["exit_code"] == 1


class TestPrep:
    def test_fixture(self, tmp_path, capsys):
        ann, vols = write_prep_fixture(tmp_path)
        # fixture volumes are smaller than the default patch preset; fill covers the rest
        code, out, _ = run(capsys, "prep", "--annotations", ann, "--volumes", vols, "--out", tmp_path / "ds",
                           "--dims", "small", "--k", 2)
        assert code == 0
        summary = json.loads(out)
        assert summary["excluded"]["excluded_median3"] == ["median3"]
        assert summary["excluded"]["excluded_nonuniform"] == ["nonuniform"]
        index = json.loads((tmp_path / "ds" / "index.json").read_text())
        assert len(index["records"]) == 10
        assert all(r["label"] in (0, 1) for r in index["records"])

    def test_malformed_row(self, tmp_path, capsys):
        ann, vols = write_prep_fixture(tmp_path)
        lines = ann.read_text().splitlines()
        lines[3] = lines[3].replace(",", ";", 1)
        ann.write_text("\n".join(lines) + "\n")
        code, _, err = run(capsys, "prep", "--annotations", ann, "--volumes", vols, "--out", tmp_path / "ds")
        assert code == 1 and "row 3" in error_line(err)["message"]


class TestSummary:
    def test_basic_within_ten_percent(self, capsys):
        code, out, _ = run(capsys, "summary", "--arch", "basic", "--json")
        doc = json.loads(out)
        assert code == 0 and abs(doc["total_parameters"] - 28e6) / 28e6 < 0.10

    def test_modensenet_note(self, capsys):
        code, out, _ = run(capsys, "summary", "--arch", "modensenet")
        assert code == 0 and "34.8M" in out and "diagnostic only" in out

    def test_half_width_halves_channels(self, capsys):
        full = json.loads(run(capsys, "summary", "--arch", "basic", "--json")[1])
        half = json.loads(run(capsys, "summary", "--arch", "basic", "--json", "--width-scale", "0.5")[1])
        for a, b in zip(full["layers"], half["layers"]):
            if a["type"] == "conv3d":
                assert b["out"] * 2 == a["out"]

    def test_all(self, capsys):
        docs = json.loads(run(capsys, "summary", "--json")[1])
        assert [d["arch"] for d in docs] == ["basic", "multi_output", "densenet", "modensenet"]

    def test_unknown_arch(self, capsys):
        assert run(capsys, "summary", "--arch", "alexnet")[0] == 2


class TestEval:
    def test_oracle_scores(self, tmp_path, capsys):
        scores = tmp_path / "scores.csv"
        scores.write_text("nodule_id,score,label\na,0.9,1\nb,0.8,1\nc,0.1,0\nd,0.2,0\n")
        code, _, _ = run(capsys, "eval", "--scores", scores, "--out", tmp_path / "ev")
        assert code == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert report["auc"] == 1.0 and report["acc"] == 1.0
        assert (tmp_path / "ev" / "roc.csv").exists() and (tmp_path / "ev" / "roc.svg").exists()

    def test_needs_one_source(self, tmp_path, capsys):
        assert run(capsys, "eval", "--out", tmp_path / "ev")[0] == 2


class TestTrainTransfer:
    def test_end_to_end(self, tmp_path, capsys, dataset):
        common = ["--dataset", dataset, "--arch", "modensenet", "--width-scale", "1/8", "--epochs", 1, "--quiet"]
        code, out, _ = run(capsys, "train", *common, "--out", tmp_path / "run")
        assert code == 0 and "pooled:" in out
        for f in range(3):
            assert (tmp_path / "run" / f"fold{f}.ckpt").exists()
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        assert len(report["folds"]) == 3 and report["n"] == 12

        assert run(capsys, "train", *common, "--out", tmp_path / "pre", "--pretrain")[0] == 0
        base = tmp_path / "pre" / "pretrained.ckpt"
        code, _, _ = run(capsys, "transfer", *common, "--out", tmp_path / "tr", "--base", base,
                         "--transfer-epochs", 2)
        assert code == 0
        log = (tmp_path / "tr" / "fold0_log.csv").read_text().strip().splitlines()
        assert len(log) == 1 + 2

        code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "run" / "fold0.ckpt", "--dataset", dataset,
                         "--out", tmp_path / "ev")
        assert code == 0 and json.loads((tmp_path / "ev" / "report.json").read_text())["n"] == 12

        code, _, err = run(capsys, "transfer", "--dataset", dataset, "--arch", "modensenet", "--width-scale", "1/4",
                           "--quiet", "--out", tmp_path / "bad", "--base", base, "--transfer-epochs", 1)
        assert code == 1 and "tensor 'small/stem/weight'" in error_line(err)["message"]

    def test_config_file_and_unknown_key(self, tmp_path, capsys, dataset):
        cfg = {"dataset": str(dataset), "out_dir": str(tmp_path / "run"),
               "train": {"arch_kind": "basic", "k_folds": 3, "validation_fraction": 0.05, "max_epochs": 1}}
        (tmp_path / "run.json").write_text(json.dumps(cfg))
        assert run(capsys, "train", "--config", tmp_path / "run.json", "--quiet")[0] == 0
        cfg["train"]["learning_rate"] = 0.1
        (tmp_path / "bad.json").write_text(json.dumps(cfg))
        code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--quiet")
        assert code == 2 and "learning_rate" in error_line(err)["message"]

    def test_rejected_epochs(self, capsys, dataset, tmp_path):
        assert run(capsys, "train", "--dataset", dataset, "--epochs", 0, "--out", tmp_path / "r")[0] == 2

    def test_missing_dataset(self, capsys, tmp_path):
        assert run(capsys, "train", "--dataset", tmp_path / "nope", "--out", tmp_path / "r")[0] == 1


@pytest.mark.skipif(shutil.which("nodulenet") is None, reason="console script not installed")
def test_console_script_help():
    proc = subprocess.run(["nodulenet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("synth", "prep", "train", "transfer", "eval", "summary"):
        assert command in proc.stdout


def test_module_entry_exit_code():
    proc = subprocess.run([sys.executable, "-m", "nodulenet", "summary", "--arch", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 2
