import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from cebsnet.cli import main

TINY = "stage_widths = 4,4,8,8,8\nfpn_width = 8\nbatch_size = 4\nepochs = 1\nmax_iters = 2\naugment = false\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "8", "--size", "64", "--seed", "1"]) == 0
    (root / "tiny.cfg").write_text(TINY)
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.cfg"), "--out", str(root / "run")]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


class TestGenData:
    def test_writes_triplets(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "d", "--count", 16, "--size", 64, "--seed", 0) == 0
        pngs = [f for _, _, fs in os.walk(tmp_path / "d") for f in fs if f.endswith(".png")]
        assert len(pngs) == 48
        assert "train=12, test=4" in capsys.readouterr().out

    def test_rerun_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            run("gen-data", "--out", tmp_path / name, "--count", 3, "--size", 32, "--seed", 4)
        for split in ("train", "test"):
            for f in sorted(os.listdir(tmp_path / "a" / split)):
                assert (tmp_path / "a" / split / f).read_bytes() == (tmp_path / "b" / split / f).read_bytes()

    def test_bad_size(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path, "--count", 2, "--size", 50) == 1
        assert "divisible by 32" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("gen-data", "--out", blocker / "sub", "--count", 1, "--size", 32) == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--bogus")
        assert exc.value.code == 1


class TestTrain:
    def test_outputs(self, workdir):
        lines = (workdir / "run" / "history.csv").read_text().splitlines()
        assert lines[0].startswith("iteration,M1") and len(lines) == 3
        assert (workdir / "run" / "last.ckpt").exists()

    def test_bad_beta(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "beta = 1.5\n")
        assert run("train", "--data", workdir / "data", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "beta" in capsys.readouterr().err

    def test_unknown_key(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("learnig_rate = 0.1\n")
        assert run("train", "--data", workdir / "data", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "learnig_rate" in capsys.readouterr().err

    def test_zero_epochs_validates_only(self, workdir, tmp_path, capsys):
        out = tmp_path / "o"
        assert run("train", "--data", workdir / "data", "--config", workdir / "tiny.cfg", "--out", out, "--epochs", 0) == 0
        assert "no checkpoint" in capsys.readouterr().out
        assert not (out / "last.ckpt").exists()

    def test_explicit_size_conflict(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "input_size = 128\n")
        assert run("train", "--data", workdir / "data", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "input_size=128" in capsys.readouterr().err

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == 2


class TestEval:
    def test_report(self, workdir, capsys):
        assert run("eval", "--data", workdir / "data", "--ckpt", workdir / "run" / "last.ckpt") == 0
        out = capsys.readouterr().out
        assert "F1" in out and "IoU" in out and "TP=" in out

    def test_null_change_data(self, workdir, tmp_path, capsys):
        run("gen-data", "--out", tmp_path / "null", "--count", 4, "--size", 64, "--objects", 0, "--difficulty", 0)
        assert run("eval", "--data", tmp_path / "null", "--ckpt", workdir / "run" / "last.ckpt") == 0
        assert "F1" in capsys.readouterr().out

    def test_truncated_checkpoint(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((workdir / "run" / "last.ckpt").read_bytes()[:-50])
        assert run("eval", "--data", workdir / "data", "--ckpt", bad) == 2
        assert "checksum" in capsys.readouterr().err

    def test_empty_split(self, workdir, capsys):
        assert run("eval", "--data", workdir / "data", "--ckpt", workdir / "run" / "last.ckpt", "--split", "val") == 1
        assert "no samples" in capsys.readouterr().err


class TestPredict:
    def test_writes_mask_and_dump(self, workdir, tmp_path):
        d = workdir / "data" / "train"
        out = tmp_path / "m.png"
        assert run("predict", "--a", d / "00000_A.png", "--b", d / "00000_B.png", "--ckpt",
                   workdir / "run" / "last.ckpt", "--out", out, "--dump-intermediate", tmp_path / "dump") == 0
        mask = np.asarray(Image.open(out))
        assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
        assert sorted(os.listdir(tmp_path / "dump")) == sorted(f"{n}.png" for n in ("M1", "M2", "M3", "M4", "M5", "Mhat", "M"))

    def test_size_mismatch(self, workdir, tmp_path, capsys):
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(a)
        Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(b)
        assert run("predict", "--a", a, "--b", b, "--ckpt", workdir / "run" / "last.ckpt", "--out", tmp_path / "o.png") == 1
        assert "--a is 64x64, --b is 32x32" in capsys.readouterr().err

    def test_missing_image(self, workdir, tmp_path):
        assert run("predict", "--a", tmp_path / "x.png", "--b", tmp_path / "y.png",
                   "--ckpt", workdir / "run" / "last.ckpt", "--out", tmp_path / "o.png") == 2


class TestChecks:
    def test_selftest(self, capsys):
        assert run("selftest") == 0
        assert "all invariants hold" in capsys.readouterr().out

    def test_gradcheck_objective(self, capsys):
        assert run("gradcheck", "--module", "objective", "--seeds", 2) == 0

    def test_gradcheck_impossible_tolerance(self):
        assert run("gradcheck", "--module", "objective", "--seeds", 1, "--tol", 1e-14) == 1

    def test_gradcheck_unknown_module(self):
        assert run("gradcheck", "--module", "nope") == 1


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "cebsnet.cli", "gen-data", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--count" in r.stdout
