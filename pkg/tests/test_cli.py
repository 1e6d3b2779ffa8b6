import json
import subprocess
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pytest

from fdvae import cli
from fdvae.trainer import TrainingLog

from .conftest import DATA, tiny_config

README = Path(__file__).resolve().parent.parent / "README.md"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    tiny_config("fdvae").save(path)
    return path


def _err_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1]


def test_evaluate_skewed_log_model_a(capsys):
    assert cli.main(["evaluate", "--predictions", str(DATA / "skewed_log_model_a.csv")]) == 0
    out = capsys.readouterr().out
    assert "Acc 0.7400 | EAcc 0.5000" in out
    rec = json.loads(out.strip().splitlines()[-1])
    assert rec["accuracy"] == pytest.approx(0.74, abs=1e-12)
    assert rec["equalized_accuracy"] == pytest.approx(0.5, abs=1e-12)


def test_unknown_subcommand(capsys):
    assert cli.main(["fly"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("usage: fdvae")
    assert "error: ConfigError:" in err


def test_batch_size_one_is_config_error(config_file, capsys):
    code = cli.main(["train-repr", "-c", str(config_file), "--set", "schedule.batch_size=1"])
    assert code == 2
    assert _err_line(capsys).startswith("error: BatchTooSmall: schedule.batch_size must be >= 2")


def test_unknown_override_key(config_file, capsys):
    assert cli.main(["train-repr", "-c", str(config_file), "--set", "schedule.bogus=1"]) == 2
    assert "unknown override key" in _err_line(capsys)


def test_data_and_training_exit_codes(config_file, tmp_path, capsys):
    assert cli.main(["evaluate", "--predictions", str(tmp_path / "missing.csv")]) == 3
    assert _err_line(capsys).startswith("error: ")
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"junk")
    assert cli.main(["train-repr", "-c", str(config_file), "--resume", str(bad), "-o", str(tmp_path / "r")]) == 4
    assert _err_line(capsys).startswith("error: IncompatibleCheckpoint:")


def test_pipeline_and_report(config_file, tmp_path, capsys, monkeypatch):
    run = tmp_path / "run"
    assert cli.main(["train-repr", "-c", str(config_file), "-o", str(run)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("resolved config:") and "batch_size: 32" in out
    assert cli.main(["train-downstream", "-c", str(config_file),
                     "--checkpoint", str(run / "checkpoints" / "repr-final.pt")]) == 0
    ds = run / "checkpoints" / "downstream-best.pt"
    assert ds.is_file()
    capsys.readouterr()
    assert cli.main(["evaluate", "--checkpoint", str(ds), "--json"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    (run / "metrics.json").write_text(json.dumps({**metrics, "seed": 0}))
    assert cli.main(["export-embeddings", "--checkpoint", str(ds), "-o", str(run / "embeddings")]) == 0

    figures = []
    monkeypatch.setattr(plt, "close", lambda fig=None: figures.append(fig))
    report_dir = tmp_path / "report"
    assert cli.main(["report", str(run), "-o", str(report_dir)]) == 0
    table = (report_dir / "results.txt").read_text().splitlines()
    assert len(table) == 3  # header, rule, one row
    pngs = sorted(report_dir.glob("*.png"))
    assert len(pngs) >= 2 and all(p.stat().st_size > 0 for p in pngs)

    # the plotted loss curves are the logged scalars
    records = TrainingLog.read(run / "logs" / "train_repr.jsonl")
    loss_fig = figures[0]
    lines = {ax.get_title(): ax.lines[0].get_xydata() for ax in loss_fig.axes if ax.lines}
    for key in ("recon", "kl", "tc", "adv_p", "total"):
        for i in (0, 1, 2, len(records) // 2, len(records) - 1):
            assert tuple(lines[key][i]) == (records[i]["step"], records[i][key])


def test_run_matrix_two_variants_three_seeds(config_file, tmp_path, capsys):
    out = tmp_path / "matrix"
    code = cli.main(["run-matrix", "-c", str(config_file), "--set", "seeds=[0, 1, 2]",
                     "--variants", "fdvae,vae", "-o", str(out)])
    assert code == 0
    text = (out / "report" / "results.txt").read_text().splitlines()
    assert len(text) == 4
    assert text[2].split()[:3] == ["fdvae[cls+adv+mal]/zt_plus_transformed_zm", "synthetic-rho0.8", "3"]
    assert "±" in text[2] and text[3].split()[0] == "vae"
    recs = json.loads((out / "report" / "results.json").read_text())
    assert all("equalized_odds_sd" in r for r in recs)


def test_prepare_data(config_file, tmp_path, capsys):
    assert cli.main(["prepare-data", "-c", str(config_file), "-o", str(tmp_path / "d")]) == 0
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["test.npz", "train.npz", "val.npz"]
    assert "train: 128 samples" in capsys.readouterr().out


def _subparsers():
    parser = cli.build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


def test_help_lists_every_flag():
    subs = _subparsers()
    assert tuple(subs) == cli.SUBCOMMANDS
    readme = README.read_text()
    for name, p in subs.items():
        text = p.format_help()
        for act in p._actions:
            assert act.help, f"{name}: {act.option_strings or act.dest} has no help"
            for opt in act.option_strings:
                assert opt in text
                if opt.startswith("--") and opt != "--help":
                    assert opt in readme, f"{name} {opt} missing from README"
        assert f"fdvae {name}" in readme


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "fdvae.cli", "evaluate", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--predictions" in res.stdout
