import json
import os
import struct

import numpy as np
import pytest

from opsr import cli
from opsr import data as D
from opsr.models import ModelSpec, build_model, save_checkpoint
from opsr.tensor_ops import Rng


def write_cube(path, bands=3, h=32, w=48, seed=0):
    rng = np.random.default_rng(seed)
    base = np.linspace(0, 1, h * w, dtype=np.float32).reshape(h, w)
    data = np.stack([base * (i + 1) + 0.05 * rng.uniform(size=(h, w))
                     for i in range(bands)]).astype(np.float32)
    D.save_cube(D.HsiCube(data=data, name="toy"), str(path))
    return data


@pytest.fixture
def prepared(tmp_path):
    cube = tmp_path / "toy.hsi"
    write_cube(cube, bands=3, h=32, w=64)
    out = tmp_path / "prep"
    rc = cli.main(["prepare", "--cube", str(cube), "--out", str(out),
                   "--seed", "0", "--tile", "16"])
    assert rc == 0
    return out


class TestPrepare:
    def test_outputs_and_counts(self, prepared, capsys):
        index = json.loads((prepared / "tiles.json").read_text())
        assert len(index["splits"]) == 8  # 2 x 4 grid of 16px tiles
        counts = {s: index["splits"].count(s) for s in ("train", "val", "test")}
        assert counts == {"train": 6, "val": 1, "test": 1}  # floor(0.15 * 8) = 1
        assert (prepared / "normalized.hsi").exists()
        assert (prepared / "manifest.json").exists()
        for i in range(8):
            assert (prepared / "pairs" / f"tile_{i:03d}_lr.hsi").exists()
            assert (prepared / "pairs" / f"tile_{i:03d}_hr.hsi").exists()

    def test_counts_line_printed(self, tmp_path, capsys):
        cube = tmp_path / "c.hsi"
        write_cube(cube, bands=2, h=64, w=64)
        rc = cli.main(["prepare", "--cube", str(cube), "--out",
                       str(tmp_path / "p"), "--seed", "1", "--tile", "16"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "16 tiles, split 12/2/2" in out

    def test_missing_cube_exits_2(self, tmp_path):
        rc = cli.main(["prepare", "--cube", str(tmp_path / "nope.hsi"),
                       "--out", str(tmp_path / "p"), "--seed", "0"])
        assert rc == 2

    def test_corrupt_cube_exits_2(self, tmp_path):
        bad = tmp_path / "bad.hsi"
        bad.write_bytes(b"garbage bytes")
        rc = cli.main(["prepare", "--cube", str(bad),
                       "--out", str(tmp_path / "p"), "--seed", "0"])
        assert rc == 2


class TestTrainEval:
    def _train(self, prepared, out, extra=()):
        return cli.main(["train", "--data", str(prepared), "--arch", "ssronn",
                         "--residual", "--epochs", "30", "--milestones", "",
                         "--eval-every", "10", "--seed", "0",
                         "--out", str(out), *extra])

    def test_train_then_eval(self, prepared, tmp_path, capsys):
        run = tmp_path / "run"
        assert self._train(prepared, run) == 0
        out = capsys.readouterr().out
        assert "parameters" in out
        assert (run / "checkpoint.opsr").exists()
        assert (run / "log.csv").exists()
        assert (run / "summary.json").exists()

        metrics_path = tmp_path / "metrics.json"
        rc = cli.main(["eval", "--checkpoint", str(run / "checkpoint.opsr"),
                       "--data", str(prepared), "--split", "val",
                       "--out", str(metrics_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PSNR:" in out and "SSIM:" in out and "SAM:" in out
        doc = json.loads(metrics_path.read_text())
        assert doc["n_tiles"] == 1

    def test_determinism_byte_identical(self, prepared, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self._train(prepared, a) == 0
        assert self._train(prepared, b) == 0
        assert (a / "checkpoint.opsr").read_bytes() == (b / "checkpoint.opsr").read_bytes()
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()

    def test_config_file_and_flag_override(self, prepared, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs=5\nlr=1e-3\n# comment\n\nmilestones=\n")
        run = tmp_path / "run"
        rc = cli.main(["train", "--config", str(cfg), "--data", str(prepared),
                       "--arch", "ssronn", "--epochs", "8", "--eval-every", "4",
                       "--seed", "0", "--out", str(run)])
        assert rc == 0
        log = (run / "log.csv").read_text().splitlines()
        assert len(log) == 9  # header + 8 epochs: the flag beat the file

    def test_unknown_config_key_exits_2(self, prepared, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate=0.1\n")
        rc = cli.main(["train", "--config", str(cfg), "--data", str(prepared),
                       "--arch", "ssronn", "--seed", "0",
                       "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_missing_data_dir_exits_2(self, tmp_path):
        rc = cli.main(["train", "--data", str(tmp_path / "nope"),
                       "--arch", "ssronn", "--seed", "0",
                       "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_divergence_exits_3(self, prepared, tmp_path, monkeypatch):
        from opsr import training as Tr

        def boom(*a, **k):
            raise Tr.DivergenceError(4, 0.5)

        monkeypatch.setattr(Tr, "train", boom)
        rc = self._train(prepared, tmp_path / "r")
        assert rc == 3


class TestSr:
    def test_sr_doubles_dimensions(self, tmp_path, capsys):
        cube = tmp_path / "toy.hsi"
        write_cube(cube, bands=3, h=20, w=24)
        model = build_model(ModelSpec(arch="ssronn", channels=3, residual=True),
                            rng=Rng(0))
        ckpt = tmp_path / "m.opsr"
        save_checkpoint(model, str(ckpt))
        out = tmp_path / "sr.hsi"
        rc = cli.main(["sr", "--checkpoint", str(ckpt), "--cube", str(cube),
                       "--out", str(out), "--band", "1"])
        assert rc == 0
        sr = D.load_cube(str(out))
        assert (sr.bands, sr.height, sr.width) == (3, 40, 48)
        pgm = out.parent / (out.name + ".band1.pgm")
        assert pgm.exists()
        assert pgm.read_bytes().startswith(b"P5\n48 40\n255\n")

    def test_band_out_of_range_exits_2(self, tmp_path):
        cube = tmp_path / "toy.hsi"
        write_cube(cube, bands=3, h=20, w=24)
        model = build_model(ModelSpec(arch="ssronn", channels=3), rng=Rng(0))
        ckpt = tmp_path / "m.opsr"
        save_checkpoint(model, str(ckpt))
        rc = cli.main(["sr", "--checkpoint", str(ckpt), "--cube", str(cube),
                       "--out", str(tmp_path / "o.hsi"), "--band", "7"])
        assert rc == 2

    def test_band_mismatch_exits_2(self, tmp_path):
        cube = tmp_path / "toy.hsi"
        write_cube(cube, bands=5)
        model = build_model(ModelSpec(arch="ssronn", channels=3), rng=Rng(0))
        ckpt = tmp_path / "m.opsr"
        save_checkpoint(model, str(ckpt))
        rc = cli.main(["sr", "--checkpoint", str(ckpt), "--cube", str(cube),
                       "--out", str(tmp_path / "o.hsi")])
        assert rc == 2

    def test_tiled_forward_constant_blending(self):
        """An identity model over overlapping feathered tiles must return
        the input exactly on a constant field (weights sum correctly)."""
        model = build_model(ModelSpec(arch="ssronn", channels=2, residual=True),
                            rng=None)  # zero weights + residual = identity
        data = np.full((2, 100, 90), 0.6, dtype=np.float32)
        out = cli.tiled_forward(model, data, tile=64, overlap=8)
        assert np.abs(out - 0.6).max() < 1e-6

    def test_tiled_forward_identity_on_random(self, rng):
        model = build_model(ModelSpec(arch="ssronn", channels=2, residual=True),
                            rng=None)
        data = rng.uniform(size=(2, 80, 70)).astype(np.float32)
        out = cli.tiled_forward(model, data, tile=64, overlap=8)
        assert np.abs(out - data).max() < 1e-6


class TestParams:
    def test_prints_exact_count(self, capsys):
        rc = cli.main(["params", "--arch", "sronn", "--channels", "224"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "8264096"

    def test_bad_channels_exits_2(self):
        assert cli.main(["params", "--arch", "sronn", "--channels", "0"]) == 2


class TestGradcheck:
    def test_passes_on_correct_gradients(self, capsys):
        rc = cli.main(["gradcheck", "--arch", "ssronn", "--channels", "3",
                       "--size", "16", "--coords", "40", "--residual"])
        assert rc == 0
        assert "max relative gradient error" in capsys.readouterr().out

    def test_bad_coords_exits_2(self):
        assert cli.main(["gradcheck", "--coords", "0"]) == 2

    def test_corrupted_gradient_exits_4(self, monkeypatch):
        """Negative control for the audit exit code."""
        from opsr import training as Tr
        monkeypatch.setattr(Tr, "grad_audit", lambda *a, **k: 0.5)
        rc = cli.main(["gradcheck", "--arch", "ssronn", "--channels", "3",
                       "--coords", "5"])
        assert rc == 4


class TestThreads:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("OPSR_THREADS", "2")
        assert cli._n_threads() == 2
        monkeypatch.setenv("OPSR_THREADS", "0")
        assert cli._n_threads() >= 1
        monkeypatch.setenv("OPSR_THREADS", "junk")
        assert cli._n_threads() >= 1
