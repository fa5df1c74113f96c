import numpy as np
import pytest
import scipy.io

from hsiconvert import cli


@pytest.fixture
def mat(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.normal(size=(10, 8, 4))
    scipy.io.savemat(str(tmp_path / "a.mat"), {"cube": arr})
    return tmp_path / "a.mat"


class TestConvertCommand:
    def test_convert_and_inline_verify(self, mat, tmp_path, capsys):
        out = tmp_path / "a.hsi"
        rc = cli.main(["convert", "--in", str(mat), "--var", "cube",
                       "--order", "HWC", "--out", str(out), "--verify"])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "wrote 10x8x4 cube" in stdout
        assert "verified" in stdout
        assert out.exists()
        assert (tmp_path / "a.meta.json").exists()

    def test_missing_variable_exits_2(self, mat, tmp_path):
        rc = cli.main(["convert", "--in", str(mat), "--var", "nope",
                       "--order", "HWC", "--out", str(tmp_path / "o.hsi")])
        assert rc == 2

    def test_known_label_mismatch_exits_2(self, mat, tmp_path):
        rc = cli.main(["convert", "--in", str(mat), "--var", "cube",
                       "--order", "HWC", "--label", "urban",
                       "--out", str(tmp_path / "o.hsi")])
        assert rc == 2


class TestVerifyCommand:
    def test_pass_and_fail(self, mat, tmp_path, capsys):
        out = tmp_path / "a.hsi"
        assert cli.main(["convert", "--in", str(mat), "--var", "cube",
                         "--order", "HWC", "--out", str(out)]) == 0
        assert cli.main(["verify", "--in", str(mat), "--var", "cube",
                         "--order", "HWC", "--cube", str(out)]) == 0
        blob = out.read_bytes()
        out.write_bytes(blob[:-1])
        assert cli.main(["verify", "--in", str(mat), "--var", "cube",
                         "--order", "HWC", "--cube", str(out)]) == 1
