import filecmp
from pathlib import Path

import numpy as np
import pytest

from courtnet import analysis as A
from courtnet.cli import main
from courtnet.config import format_kv
from courtnet.data import generate_random_scenes, load_dataset, read_pgm, SceneSpec, write_dataset
from courtnet.losses import MetricsReport, dataset_metrics
from courtnet.training import load_checkpoint, evaluate

TINY = {"pros_blocks": 1, "def_blocks": 1, "batch_size": 2, "lr_max": 1e-3, "warmup_steps": 2}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(format_kv(TINY))
    assert main(["generate", "--random", "--count", "4", "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "tiny.txt"), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--epochs", "1"]) == 0
    return root


def same_tree(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


class TestGenerate:
    def test_probe_count(self, tmp_path, capsys):
        assert main(["generate", "--probe", "--out", str(tmp_path / "p")]) == 0
        assert len((tmp_path / "p" / "manifest.tsv").read_text().splitlines()) == 1764
        assert "1764" in capsys.readouterr().out

    def test_empty(self, tmp_path):
        assert main(["generate", "--random", "--count", "0", "--out", str(tmp_path / "e")]) == 0
        assert (tmp_path / "e" / "manifest.tsv").read_text() == ""

    def test_same_seed_identical_directories(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "--random", "--count", "3", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert same_tree(tmp_path / "a", tmp_path / "b")

    def test_spec_file(self, tmp_path):
        (tmp_path / "s.txt").write_text("n_targets_min=0\nn_targets_max=0\n")
        assert main(["generate", "--spec", str(tmp_path / "s.txt"), "--count", "2", "--out", str(tmp_path / "o")]) == 0
        assert not any(s.mask.any() for s in load_dataset(tmp_path / "o" / "manifest.tsv"))

    def test_bad_spec_is_config_error(self, tmp_path):
        (tmp_path / "s.txt").write_text("sparkle=1\n")
        assert main(["generate", "--spec", str(tmp_path / "s.txt"), "--out", str(tmp_path / "o")]) == 2


class TestTrain:
    def test_outputs(self, workdir):
        run = workdir / "run"
        assert (run / "checkpoint.cnt").is_file()
        assert len((run / "train_log.csv").read_text().splitlines()) == 2
        assert "pros_blocks=1" in (run / "config.txt").read_text()

    def test_resume_matches_unbroken(self, workdir, tmp_path):
        cfg, data = str(workdir / "tiny.txt"), str(workdir / "data")
        assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "full"), "--epochs", "2"]) == 0
        assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "half"), "--epochs", "1"]) == 0
        assert main(["train", "--data", data, "--out", str(tmp_path / "rest"), "--epochs", "2",
                     "--resume", str(tmp_path / "half" / "checkpoint.cnt")]) == 0
        a = load_checkpoint(tmp_path / "full" / "checkpoint.cnt")
        b = load_checkpoint(tmp_path / "rest" / "checkpoint.cnt")
        for kind, p in a.net.networks().items():
            q = b.net.networks()[kind]
            assert all(np.array_equal(p[k].data, q[k].data) for k in p)

    def test_no_jury_flag(self, workdir, tmp_path):
        assert main(["train", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "nj"), "--epochs", "1", "--no-jury"]) == 0
        assert load_checkpoint(tmp_path / "nj" / "checkpoint.cnt").config.train.no_jury

    def test_missing_manifest(self, workdir, tmp_path):
        assert main(["train", "--config", str(workdir / "tiny.txt"), "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "x")]) == 3

    def test_invalid_config(self, workdir, tmp_path):
        (tmp_path / "bad.txt").write_text("gamma=high\n")
        assert main(["train", "--config", str(tmp_path / "bad.txt"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_nan_is_numerical_exit(self, workdir, tmp_path):
        (tmp_path / "nan.txt").write_text(format_kv({**TINY, "pros_out_bias": "nan"}))
        assert main(["train", "--config", str(tmp_path / "nan.txt"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "x"), "--epochs", "1"]) == 4


class TestEvalDetect:
    def test_report_matches_library(self, workdir, tmp_path):
        report = tmp_path / "r.csv"
        assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.cnt"),
                     "--data", str(workdir / "data"), "--report", str(report)]) == 0
        got = MetricsReport.read_csv(report)
        st = load_checkpoint(workdir / "run" / "checkpoint.cnt")
        ref = evaluate(st.net, load_dataset(workdir / "data" / "manifest.tsv"))
        assert got.f1 == ref.f1 and got.precision == ref.precision
        assert Path(str(report) + ".config.txt").is_file()

    def test_oracle_and_flipped(self, workdir):
        masks = [s.mask for s in load_dataset(workdir / "data" / "manifest.tsv")]
        assert dataset_metrics(zip(masks, masks)).mean_f1 == 1.0
        assert dataset_metrics(zip([1 - m for m in masks], masks)).mean_precision == 0.0

    def test_detect_binary_pgm(self, workdir, tmp_path):
        out = tmp_path / "m.pgm"
        img = workdir / "data" / "images" / "00000.pgm"
        assert main(["detect", "--checkpoint", str(workdir / "run" / "checkpoint.cnt"),
                     "--image", str(img), "--out", str(out), "--threshold", "0.01"]) == 0
        mask = read_pgm(out)
        assert mask.shape == (56, 56)
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_detect_wrong_size(self, workdir, tmp_path):
        from courtnet.data import write_pgm

        write_pgm(tmp_path / "small.pgm", np.zeros((8, 8)))
        assert main(["detect", "--checkpoint", str(workdir / "run" / "checkpoint.cnt"),
                     "--image", str(tmp_path / "small.pgm"), "--out", str(tmp_path / "o.pgm")]) == 3

    def test_corrupt_checkpoint(self, tmp_path, workdir):
        (tmp_path / "bad.cnt").write_bytes(b"NOPE")
        assert main(["eval", "--checkpoint", str(tmp_path / "bad.cnt"), "--data", str(workdir / "data")]) == 3


class TestAnalysisCommands:
    def test_fft_period_nine(self, tmp_path, capsys):
        t = np.arange(1764)
        values = np.stack([np.cos(2 * np.pi * t / 9 + k) for k in range(32)], 1)
        A.FeatureSeries(values, list(t), list(t // 9), list(t % 9)).write_csv(tmp_path / "s.csv")
        assert main(["fft", "--series", str(tmp_path / "s.csv"), "--out", str(tmp_path / "sp.csv")]) == 0
        assert "dominant period: 9" in capsys.readouterr().out
        assert (tmp_path / "sp.csv").is_file()

    def test_fft_bad_series(self, tmp_path):
        (tmp_path / "s.csv").write_text("not,a,series\n")
        assert main(["fft", "--series", str(tmp_path / "s.csv")]) == 3

    def test_probe_attention(self, workdir, tmp_path, capsys):
        assert main(["probe-attention", "--checkpoint", str(workdir / "run" / "checkpoint.cnt"),
                     "--out", str(tmp_path / "pa")]) == 0
        out = capsys.readouterr().out
        assert "frames: 1764" in out and "dominant period:" in out
        assert len(A.FeatureSeries.read_csv(tmp_path / "pa" / "series.csv")) == 1764

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "0"]) == 0
        assert "within tolerance" in capsys.readouterr().out

    def test_gradcheck_failure_exit(self, monkeypatch):
        import courtnet.cli as cli

        monkeypatch.setattr(cli, "run_suite", lambda seeds: [("matmul", 0, 0.5, 1e-4)])
        assert main(["gradcheck"]) == 4
