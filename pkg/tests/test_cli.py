import csv
import io

import numpy as np
import pytest

from havit.cli import EXIT_CONFIG, EXIT_OK, main, write_pgm
from havit.config import KEYS, RunSpec, parse_lines
from havit.errors import ConfigurationError

QUICK = ["--preset", "tiny", "--set", "data.samples_per_class=8", "--set", "data.eval_samples_per_class=4",
         "--set", "train.batch_size=8", "--set", "train.warmup_epochs=1"]


def run(cmd, out, *extra):
    return main([cmd, *QUICK, "--out", str(out), *extra])


def rows(path):
    return list(csv.reader(io.StringIO(path.read_text())))


# -- config ------------------------------------------------------------------

def test_echo_round_trips():
    spec = RunSpec.resolve("model.alpha=0.3\ntrain.alpha_grid=0.1,0.5\n", {"train.seed": 4}, "tiny")
    again = RunSpec.resolve(spec.to_text())
    assert again.values == spec.values
    assert again["model.d_model"] == 16 and again["train.alpha_grid"] == (0.1, 0.5)


def test_precedence_order():
    text = "model.alpha=0.3\nmodel.depth=3\n"
    spec = RunSpec.resolve(text, {"model.alpha": 0.7}, "tiny")
    assert spec["model.alpha"] == 0.7  # override beats file
    assert spec["model.depth"] == 3  # file beats preset
    assert spec["model.d_model"] == 16  # preset beats default


def test_config_errors():
    with pytest.raises(ConfigurationError, match="unknown config key"):
        parse_lines("model.colour=red\n")
    with pytest.raises(ConfigurationError, match=":2:"):
        parse_lines("model.alpha=0.5\nnonsense\n")
    with pytest.raises(ConfigurationError, match="bad value"):
        parse_lines("model.depth=two\n")
    with pytest.raises(ConfigurationError):
        RunSpec.resolve("model.init=ones\n")
    with pytest.raises(ConfigurationError):
        RunSpec.resolve(None, None, "huge")


def test_comments_and_blank_lines():
    assert parse_lines("# header\n\nmodel.alpha = 0.25  # inline\n") == {"model.alpha": 0.25}


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("HAVIT_OUT", str(tmp_path / "env-out"))
    assert RunSpec.resolve()["run.out"] == str(tmp_path / "env-out")
    assert KEYS["run.out"].default is None


# -- subcommands -------------------------------------------------------------

def test_train_writes_outputs(tmp_path, capsys):
    assert run("train", tmp_path, "--epochs", "2") == EXIT_OK
    table = rows(tmp_path / "metrics.csv")
    assert table[0] == ["epoch", "train_loss", "train_acc", "eval_acc", "lr"]
    assert [r[0] for r in table[1:]] == ["1", "2"]
    for name in ("model.ckpt", "config.echo", "training_curves.png"):
        assert (tmp_path / name).is_file()
    echoed = RunSpec.resolve((tmp_path / "config.echo").read_text())
    assert echoed["train.epochs"] == 2
    assert "trained" in capsys.readouterr().out


def test_alpha_one_reproduces_baseline(tmp_path):
    assert run("train", tmp_path / "a", "--epochs", "1", "--alpha", "1.0") == EXIT_OK
    assert run("train", tmp_path / "b", "--epochs", "1", "--baseline") == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_and_export_from_checkpoint(tmp_path):
    assert run("train", tmp_path, "--epochs", "1") == EXIT_OK
    ckpt = str(tmp_path / "model.ckpt")
    assert run("eval", tmp_path, "--checkpoint", ckpt) == EXIT_OK
    assert rows(tmp_path / "eval.csv")[0] == ["split", "loss", "accuracy"]
    assert run("export-attn", tmp_path, "--checkpoint", ckpt, "--layers", "2", "--num-images", "2") == EXIT_OK
    assert (tmp_path / "attn_img1_layer2.pgm").read_bytes().startswith(b"P5\n4 4\n255\n")
    assert (tmp_path / "attention_maps.png").is_file()
    assert len(rows(tmp_path / "attention.csv")) == 1 + 2 * 16


def test_exit_codes(tmp_path):
    assert run("train", tmp_path, "--set", "model.colour=red") == EXIT_CONFIG
    assert run("train", tmp_path, "--alpha", "1.5") == EXIT_CONFIG
    assert run("train", tmp_path, "--data", "cifar100") == EXIT_CONFIG
    assert run("train", tmp_path, "--data", "cifar100", "--data-path", str(tmp_path / "nope")) == EXIT_CONFIG
    assert run("train", tmp_path, "--set", "model.patch_size=5") == EXIT_CONFIG
    assert run("sweep", tmp_path, "--alphas", "") == EXIT_CONFIG
    assert run("eval", tmp_path) == EXIT_CONFIG
    assert run("eval", tmp_path, "--checkpoint", str(tmp_path / "missing.ckpt")) == EXIT_CONFIG
    assert main(["gradcheck", "--preset", "desk", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_export_rejects_out_of_range_layer(tmp_path):
    assert run("train", tmp_path, "--epochs", "1") == EXIT_OK
    assert run("export-attn", tmp_path, "--checkpoint", str(tmp_path / "model.ckpt"), "--layers", "3") == EXIT_CONFIG


def test_eval_rejects_incompatible_checkpoint(tmp_path):
    assert run("train", tmp_path, "--epochs", "1") == EXIT_OK
    code = run("eval", tmp_path, "--checkpoint", str(tmp_path / "model.ckpt"), "--set", "data.num_classes=3")
    assert code == EXIT_CONFIG


def test_config_file_is_honoured(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model.init=zero\ntrain.epochs=1\n")
    assert main(["train", *QUICK, "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert "model.init=zero" in (tmp_path / "config.echo").read_text()


def test_sweep_small_grid(tmp_path):
    assert run("sweep", tmp_path, "--epochs", "1", "--alphas", "0.5,1.0", "--init", "zero") == EXIT_OK
    table = rows(tmp_path / "sweep.csv")
    assert [r[:2] for r in table[1:]] == [["baseline", "none"], ["0.50", "zero"], ["1.00", "zero"]]
    assert table[3][3] == "0"
    assert (tmp_path / "alpha_sweep.png").is_file()


def test_gradcheck_sampled_report(tmp_path):
    code = main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck.max_elements=3"])
    report = rows(tmp_path / "gradcheck.csv")
    assert report[0] == ["param", "checked", "max_rel_error", "max_abs_error"]
    assert all(float(r[3]) < 1e-9 for r in report[1:])
    assert code in (0, 3)


def test_write_pgm_scales_peak(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.array([[0.0, 0.25], [0.5, 0.125]]))
    data = (tmp_path / "m.pgm").read_bytes()
    assert data == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64])
