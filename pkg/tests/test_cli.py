import numpy as np
import pytest

from cfmkit import cli
from cfmkit import config as C
from cfmkit.config import RunConfig
from cfmkit.errors import NumericError
from cfmkit.gradcheck import CheckResult

TINY = ["nets.hidden=8,8", "nets.time_features=4", "nets.cond_dim=2", "nets.disc_hidden=4",
        "data.samples_per_epoch=32", "trainer.batch_size=16", "trainer.stage1_epochs=1",
        "trainer.stage2_epochs=1", "trainer.adversarial_epochs=1", "eval.samples_per_condition=32"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_writes_checkpoints_metrics_and_snapshot(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--out", str(tmp_path), *TINY)
    assert code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"stage1.ckpt", "stage2.ckpt", "adversarial.ckpt", "final.ckpt", "metrics.csv", "config.ini"} <= names
    assert C.load(tmp_path / "config.ini").hidden == (8, 8)


def test_rerun_from_snapshot_is_bitwise(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "train", "--out", str(a), "--seed", "3", *TINY)[0] == 0
    assert run(capsys, "train", "--out", str(b), "--config", str(a / "config.ini"))[0] == 0
    for name in ("final.ckpt", "stage1.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_sample_twice_gives_identical_csv(tmp_path, capsys):
    outs = []
    for sub in ("one", "two"):
        code, _, _ = run(capsys, "sample", "--nfe", "2", "--seed", "7", "--out", str(tmp_path / sub), *TINY)
        assert code == 0
        outs.append((tmp_path / sub / "samples.csv").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "one" / "samples.svg").read_text().startswith("<svg")


def test_eval_and_sweep_reports(tmp_path, capsys):
    assert run(capsys, "train", "--out", str(tmp_path), *TINY)[0] == 0
    ckpt = str(tmp_path / "final.ckpt")
    code, out, _ = run(capsys, "sweep", "--checkpoint", ckpt, "--nfe", "1,2", "--seeds", "0,1", "--out",
                       str(tmp_path / "sw"), *TINY)
    assert code == 0
    assert len((tmp_path / "sw" / "report.csv").read_text().splitlines()) == 1 + 4
    assert out.count("energy_distance=") == 4
    assert run(capsys, "eval", "--checkpoint", ckpt, "--out", str(tmp_path / "ev"), *TINY)[0] == 0


def test_ablate_isolates_each_seed(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--presets", "A,D", "--seeds", "0,1", "--out", str(tmp_path), *TINY)
    assert code == 0
    for seed in (0, 1):
        assert sorted(p.name for p in (tmp_path / f"seed{seed}").iterdir()) == ["A.ckpt", "D.ckpt", "report.csv"]
    assert "preset=A" in out and "preset=D" in out
    assert run(capsys, "ablate", "--presets", "Z", "--out", str(tmp_path))[0] == cli.EXIT_USAGE


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run(capsys, "train", *TINY)[0] == 0
    assert (tmp_path / "env" / "final.ckpt").exists()


def test_help_lists_every_key_with_its_default(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for key, section in C.SECTION_OF.items():
        assert f"{section}.{key} = {C._format(getattr(RunConfig(), key))}" in text
    for code in cli.EXIT_CODES:
        assert f"  {code}  " in text


def test_config_errors_have_distinct_codes(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "missing.cfg"))
    assert code == cli.EXIT_CONFIG_MISSING
    assert err.startswith("error code=3 ") and err.count("\n") == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("no section header\n")
    assert run(capsys, "train", "--config", str(bad))[0] == cli.EXIT_CONFIG_PARSE
    bad.write_text("[objectives]\nsegmentz = 2\n")
    assert run(capsys, "train", "--config", str(bad))[0] == cli.EXIT_CONFIG_SCHEMA
    assert run(capsys, "train", "--out", str(tmp_path), "trainer.batch_size=abc")[0] == cli.EXIT_CONFIG_SCHEMA
    assert run(capsys, "sample", "--nfe", "x", "--out", str(tmp_path))[0] == cli.EXIT_USAGE


def test_usage_error_from_argparse(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["fly"])
    assert info.value.code == cli.EXIT_USAGE


def test_corrupt_checkpoint_is_io_error(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"CFMC garbage")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad), "--out", str(tmp_path))
    assert code == cli.EXIT_IO
    assert "kind=CheckpointError" in err


def test_numeric_and_internal_failures(tmp_path, capsys, monkeypatch):
    def diverge(cfg):
        raise NumericError("loss became nan")

    monkeypatch.setattr(cli, "train_run", diverge)
    assert run(capsys, "train", "--out", str(tmp_path))[0] == cli.EXIT_NUMERIC

    def crash(cfg):
        raise KeyError("surprise")

    monkeypatch.setattr(cli, "train_run", crash)
    assert run(capsys, "train", "--out", str(tmp_path))[0] == cli.EXIT_ERROR


def test_gradcheck_exit_codes(tmp_path, capsys, monkeypatch):
    code, out, _ = run(capsys, "gradcheck", "--instances", "1", "--out", str(tmp_path))
    assert code == 0
    assert "FAIL" not in out and (tmp_path / "gradcheck.txt").exists()
    monkeypatch.setattr(cli, "run_checks", lambda n, seed: [CheckResult("bad", n, 1.0, 0.0)])
    assert run(capsys, "gradcheck", "--out", str(tmp_path))[0] == cli.EXIT_CHECK_FAILED


def test_svg_scatter_is_well_formed():
    svg = cli.scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]), np.zeros((1, 2)))
    assert svg.count("<circle") == 3 and svg.rstrip().endswith("</svg>")
