import csv
import io
import json

import numpy as np
import pytest

from imvlstm import cli, evalx, trainer

SMALL = ["--epochs", "3", "--per-var-dim", "3", "--window", "5", "--batch-size", "32", "-q"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--length", "200", "--out", str(d / "s.csv")]) == 0
    return d


@pytest.fixture(scope="module")
def run(workdir):
    out = workdir / "run"
    code = cli.main(["train", "--data", str(workdir / "s.csv"), "--target", "y", "--out", str(out)] + SMALL)
    assert code == 0
    return out


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


class TestSynth:
    def test_byte_identical(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert cli.main(["synth", "--seed", "42", "--length", "50", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_stdout_and_drivers(self, capsys):
        assert cli.main(["synth", "--length", "20", "--n-vars", "2", "--driver", "2:1:0.5", "--noise", "0"]) == 0
        rows = _rows(capsys.readouterr().out)
        vals = np.array(rows[1:], dtype=float)
        assert rows[0] == ["x1", "x2", "y"]
        np.testing.assert_allclose(vals[2:, -1], 0.5 * vals[:-2, 1], atol=1e-15)

    def test_bad_driver_is_usage_error(self, capsys):
        assert cli.main(["synth", "--driver", "9:0:1.0"]) == 2


class TestTrain:
    def test_outputs(self, run):
        assert {p.name for p in run.iterdir()} == {"checkpoint.json", "metrics.json", "importance_history.csv"}
        metrics = json.loads((run / "metrics.json").read_text())
        assert set(metrics) >= {"train", "val", "test", "best_epoch"}
        assert set(metrics["test"]) == {"rmse", "mae", "n_test"}
        hist = _rows((run / "importance_history.csv").read_text())
        assert hist[0][0] == "epoch" and [r[0] for r in hist[1:]] == ["0", "3"]

    def test_deterministic_metrics(self, workdir, run):
        out = workdir / "again"
        cli.main(["train", "--data", str(workdir / "s.csv"), "--target", "y", "--out", str(out)] + SMALL)
        assert (out / "metrics.json").read_bytes() == (run / "metrics.json").read_bytes()

    def test_zero_epochs_uniform_importance(self, workdir):
        out = workdir / "zero"
        args = ["train", "--data", str(workdir / "s.csv"), "--target", "y", "--out", str(out), "--epochs", "0", "-q"]
        assert cli.main(args) == 0
        ck = trainer.load(out / "checkpoint.json")
        np.testing.assert_allclose(ck.importance.var_importance, 1 / 7, atol=1e-15)

    def test_missing_csv(self, tmp_path, capsys):
        code = cli.main(["train", "--data", str(tmp_path / "nope.csv"), "--target", "y", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "nope.csv" in capsys.readouterr().err
        assert not (tmp_path / "o" / "checkpoint.json").exists()

    def test_problems_reported_together(self, tmp_path, capsys):
        code = cli.main(["train", "--window", "0", "--lr", "-1", "--variant", "gru", "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        for word in ("data", "target", "window", "variant", "learning_rate"):
            assert word in err
        assert not (tmp_path / "o").exists()

    def test_toml_config_with_flag_override(self, workdir, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('[data]\npath_unused = 1\n')
        assert cli.main(["train", "--config", str(cfg), "--data", "x", "--target", "y"]) == 2
        cfg.write_text(f'[data]\ndata = "{workdir / "s.csv"}"\ntarget = "y"\nwindow = 5\n'
                       f'[model]\nvariant = "full"\nper_var_dim = 2\n[train]\nepochs = 5\nseed = 3\n')
        out = tmp_path / "o"
        assert cli.main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(out), "-q"]) == 0
        ck = trainer.load(out / "checkpoint.json")
        assert ck.model.cell.variant == "full" and ck.model.cell.per_var_dim == 2
        assert ck.train.epochs == 1 and ck.train.seed == 3 and ck.window == 5

    def test_bad_toml(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("epochs = = 3")
        assert cli.main(["train", "--config", str(cfg)]) == 2


class TestPredict:
    def test_reproduces_test_rmse(self, workdir, run, capsys):
        assert cli.main(["predict", "--checkpoint", str(run / "checkpoint.json"), "--data", str(workdir / "s.csv")]) == 0
        rows = _rows(capsys.readouterr().out)
        assert rows[0] == ["window_start", "y_true", "y_hat"]
        body = rows[1:]
        assert body[-1][1] == ""  # the last window has no observed target
        metrics = json.loads((run / "metrics.json").read_text())
        n_test = metrics["test"]["n_test"]
        tail = np.array([[float(r[1]), float(r[2])] for r in body[:-1]])[-n_test:]
        assert abs(evalx.rmse(tail[:, 0], tail[:, 1]) - metrics["test"]["rmse"]) <= 1e-9

    def test_single_window(self, workdir, run, tmp_path, capsys):
        lines = (workdir / "s.csv").read_text().splitlines()
        (tmp_path / "w.csv").write_text("\n".join(lines[:6]) + "\n")  # header + T rows
        assert cli.main(["predict", "--checkpoint", str(run / "checkpoint.json"), "--data", str(tmp_path / "w.csv")]) == 0
        assert len(_rows(capsys.readouterr().out)) == 2

    def test_column_order_irrelevant(self, workdir, run, tmp_path, capsys):
        rows = _rows((workdir / "s.csv").read_text())
        perm = [6, 2, 0, 5, 1, 4, 3]
        with (tmp_path / "p.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows([[r[i] for i in perm] for r in rows])
        ck = str(run / "checkpoint.json")
        cli.main(["predict", "--checkpoint", ck, "--data", str(workdir / "s.csv")])
        a = capsys.readouterr().out
        cli.main(["predict", "--checkpoint", ck, "--data", str(tmp_path / "p.csv")])
        assert capsys.readouterr().out == a

    def test_column_mismatch(self, workdir, run, tmp_path, capsys):
        rows = _rows((workdir / "s.csv").read_text())
        rows[0][2] = "zzz"
        with (tmp_path / "m.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        code = cli.main(["predict", "--checkpoint", str(run / "checkpoint.json"), "--data", str(tmp_path / "m.csv")])
        assert code == 2
        err = capsys.readouterr().err
        assert "x3" in err and "zzz" in err

    def test_missing_checkpoint(self, tmp_path, workdir):
        assert cli.main(["predict", "--checkpoint", str(tmp_path / "x.json"), "--data", str(workdir / "s.csv")]) == 2


class TestImportanceAndSelect:
    def test_importance_shapes(self, run, capsys):
        assert cli.main(["importance", "--checkpoint", str(run / "checkpoint.json")]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert len(rep["I"]) == 7 and len(rep["T"]) == 7
        assert all(len(row) == 5 for row in rep["T"].values())
        assert sorted(rep["ranking"]) == sorted(rep["T"])

    @pytest.mark.parametrize("ranking", ["importance", "pearson"])
    def test_select_half(self, workdir, run, tmp_path, ranking):
        out = tmp_path / "sel.csv"
        code = cli.main(["select", "--checkpoint", str(run / "checkpoint.json"), "--data", str(workdir / "s.csv"),
                         "--fraction", "0.5", "--ranking", ranking, "--out", str(out)])
        assert code == 0
        header = _rows(out.read_text())[0]
        assert len(header) == 4 and header[-1] == "y"

    def test_bottom_is_complement(self, workdir, run, capsys):
        base = ["select", "--checkpoint", str(run / "checkpoint.json"), "--data", str(workdir / "s.csv")]
        cli.main(base)
        top = _rows(capsys.readouterr().out)[0]
        cli.main(base + ["--bottom"])
        bottom = _rows(capsys.readouterr().out)[0]
        assert sorted(top[:-1] + bottom[:-1]) == ["x1", "x2", "x3", "x4", "x5", "x6"]
