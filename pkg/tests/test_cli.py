import json

import pytest

from mmfusion.cli import main
from mmfusion.config import save_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_toml(tiny, tmp_path):
    path = tmp_path / "tiny.toml"
    save_config(tiny(), path)
    return path


class TestCommands:
    def test_config_prints_toml(self, capsys):
        code, out, _ = run(capsys, "config", "--preset", "full", "--seed", "4")
        assert code == 0
        assert "seed = 4" in out and "[model]" in out

    def test_gen_data_is_deterministic(self, capsys, tmp_path):
        args = ["--videos-per-class", "1", "--frames", "30"]
        assert run(capsys, "gen-data", *args, "--out", tmp_path / "a.bin")[0] == 0
        assert run(capsys, "gen-data", *args, "--out", tmp_path / "b.bin")[0] == 0
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_train_eval_predict_smooth_vote(self, capsys, tmp_path, tiny_toml):
        out = tmp_path / "run"
        code, text, _ = run(capsys, "train", "--config", tiny_toml, "--out", out)
        assert code == 0 and "pooled out-of-fold macro_f1=" in text
        report = json.loads((out / "report.json").read_text())
        assert report["task"] == "expr" and len(report["folds"]) == 2

        ckpt = out / "fold0.ckpt"
        code, text, _ = run(capsys, "eval", "--config", tiny_toml, "--checkpoint", ckpt, "--out", tmp_path / "m.json")
        assert code == 0
        assert json.loads(text) == json.loads((tmp_path / "m.json").read_text())

        preds = tmp_path / "p.tsv"
        assert run(capsys, "predict", "--config", tiny_toml, "--checkpoint", ckpt, "--out", preds)[0] == 0
        assert run(capsys, "smooth", "--config", tiny_toml, "--in", preds, "--out", tmp_path / "s.tsv")[0] == 0
        code, text, _ = run(capsys, "vote", preds, tmp_path / "s.tsv", preds, "--out", tmp_path / "v.tsv")
        assert code == 0 and "voted 3 files" in text
        # two copies of the raw file outvote the smoothed one
        assert (tmp_path / "v.tsv").read_bytes() == preds.read_bytes()

    def test_gradcheck_ops_only(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--ops-only")
        assert code == 0 and "pass" in out


class TestErrors:
    def test_vote_needs_two_files(self, capsys, tmp_path):
        code, _, err = run(capsys, "vote", tmp_path / "a.tsv", "--out", tmp_path / "v.tsv")
        assert code == 2
        first = err.splitlines()[0]
        assert first.startswith("error: code=contract message=")
        assert "need >= 2" in first

    def test_missing_file_is_io_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "smooth", "--in", tmp_path / "missing.tsv", "--out", tmp_path / "o.tsv")
        assert code == 2 and err.startswith("error: code=io ")

    def test_bad_config(self, capsys, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("epochs = 'many'\n")
        code, _, err = run(capsys, "config", "--config", bad)
        assert code == 2 and err.startswith("error: code=config ")

    def test_truncated_checkpoint(self, capsys, tmp_path, tiny_toml):
        ckpt = tmp_path / "x.ckpt"
        ckpt.write_bytes(b"MMFCKPT\x00\x01")
        code, _, err = run(capsys, "eval", "--config", tiny_toml, "--checkpoint", ckpt)
        assert code == 2 and err.startswith("error: code=format ")
