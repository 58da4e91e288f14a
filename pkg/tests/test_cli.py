import json

import pytest

from proxtune.cli import main, sparkline

SMALL = """
[model]
input_dim = 4
output_dim = 2
layout = vision_early:8, vision_late:8, bridge:6, lang_early:8, lang_late:8, head:2:scratch
[task]
n_samples = 256
eval_samples = 64
[policy]
mode = {mode}
lambda_max = {lambda_max}
[run]
pretrain_steps = 60
finetune_steps = 40
log_every = 10
[sweep]
schedules = constant, linear, cosine
values = 0.5, 2, 3
masks = standard
"""


def write_cfg(dirpath, name="exp.ini", mode="maps", lambda_max=1.0, extra=""):
    p = dirpath / name
    p.write_text(SMALL.format(mode=mode, lambda_max=lambda_max) + extra)
    return p


@pytest.fixture
def pretrained(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "pre")]) == 0
    return cfg, tmp_path / "pre" / "pretrain.ptar"


def test_misspelled_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[policy]\nmode = maps\nlamda_max = 2\n")
    assert main(["pretrain", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "lamda_max" in err and "line 3" in err


def test_missing_config_exit_4(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.ini")]) == 4


def test_pretrain_writes_archive_and_manifest(pretrained):
    cfg, archive = pretrained
    assert archive.exists()
    manifest = json.loads((archive.parent / "pretrain.manifest.json").read_text())
    assert manifest["outputs"] == ["pretrain.ptar"]
    assert str(cfg.parent) not in json.dumps(manifest)
    assert (archive.parent / "pretrain.resolved.ini").exists()


def test_default_out_dir_next_to_config(tmp_path, monkeypatch):
    monkeypatch.delenv("PROXTUNE_OUT_ROOT", raising=False)
    cfg = write_cfg(tmp_path)
    assert main(["pretrain", "--config", str(cfg)]) == 0
    assert (tmp_path / "runs" / "pretrain.ptar").exists()


def test_env_out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("PROXTUNE_OUT_ROOT", str(tmp_path / "envroot"))
    cfg = write_cfg(tmp_path)
    assert main(["pretrain", "--config", str(cfg)]) == 0
    assert (tmp_path / "envroot" / "pretrain.ptar").exists()
    assert main(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "pretrain.ptar").exists()


def _full_run(tmp_path, sub):
    cfg = write_cfg(tmp_path, name=f"{sub}.ini")
    out = tmp_path / sub
    assert main(["pretrain", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert main(["finetune", "--config", str(cfg), "--pretrained", str(out / "pretrain.ptar"), "--out-dir", str(out)]) == 0
    assert main(["report", str(out / "metrics.csv")]) == 0
    return out


def test_rerun_is_byte_identical(tmp_path):
    a = _full_run(tmp_path, "a")
    b = _full_run(tmp_path, "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert "metrics.report.txt" in names and "metrics.dev_head.dat" in names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_finetune_rejects_mismatched_archive(tmp_path, pretrained):
    _, archive = pretrained
    other = tmp_path / "other.ini"
    other.write_text(SMALL.format(mode="maps", lambda_max=1.0).replace("input_dim = 4", "input_dim = 5"))
    rc = main(["finetune", "--config", str(other), "--pretrained", str(archive), "--out-dir", str(tmp_path / "x")])
    assert rc == 5


def test_finetune_rejects_corrupt_archive(tmp_path, pretrained):
    cfg, archive = pretrained
    bad = tmp_path / "bad.ptar"
    bad.write_bytes(archive.read_bytes()[:-9])
    assert main(["finetune", "--config", str(cfg), "--pretrained", str(bad), "--out-dir", str(tmp_path / "x")]) == 5
    assert main(["finetune", "--config", str(cfg), "--pretrained", str(tmp_path / "none.ptar")]) == 4


def test_lambda_zero_matches_none_bytes(tmp_path, pretrained):
    _, archive = pretrained
    outs = []
    for mode, lam in (("maps", 0.0), ("none", 1.0)):
        cfg = write_cfg(tmp_path, name=f"{mode}.ini", mode=mode, lambda_max=lam)
        out = tmp_path / f"ft_{mode}"
        assert main(["finetune", "--config", str(cfg), "--pretrained", str(archive), "--out-dir", str(out)]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_finetune_manifest_records_archive_hash(tmp_path, pretrained):
    import hashlib

    cfg, archive = pretrained
    out = tmp_path / "ft"
    assert main(["finetune", "--config", str(cfg), "--pretrained", str(archive), "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "finetune.manifest.json").read_text())
    assert manifest["pretrained_sha256"] == hashlib.sha256(archive.read_bytes()).hexdigest()


def test_sweeps(tmp_path, pretrained):
    cfg, archive = pretrained
    out = tmp_path / "sw"
    common = ["--config", str(cfg), "--pretrained", str(archive), "--out-dir", str(out)]
    assert main(["sweep", "--kind", "scheduler", *common]) == 0
    assert len((out / "sweep_scheduler.csv").read_text().splitlines()) == 10
    assert main(["sweep", "--kind", "freeze", *common]) == 0
    assert len((out / "sweep_freeze.csv").read_text().splitlines()) == 7


def test_empty_sweep_grid_exit_2(tmp_path, capsys):
    cfg = tmp_path / "e.ini"
    cfg.write_text(SMALL.format(mode="maps", lambda_max=1).replace("values = 0.5, 2, 3", "values ="))
    assert main(["sweep", "--kind", "scheduler", "--config", str(cfg)]) == 2
    assert "empty" in capsys.readouterr().err


def test_report_stack_order_and_truncation(tmp_path, capsys):
    out = _full_run(tmp_path, "r")
    text = capsys.readouterr().out
    order = ["vision_early", "vision_late", "bridge", "lang_early", "lang_late", "head"]
    positions = [text.index(f"\n{m} ") for m in order]
    assert positions == sorted(positions)

    data = (out / "metrics.csv").read_text()
    trunc = tmp_path / "trunc.csv"
    trunc.write_text(data[: len(data) - 7])
    assert main(["report", str(trunc)]) == 2
    err = capsys.readouterr().err
    assert f"line {len(data.splitlines())}" in err


def test_divergence_exit_3_writes_partial_metrics(tmp_path, pretrained):
    cfg, archive = pretrained
    hot = write_cfg(tmp_path, name="hot.ini", extra="")
    hot.write_text(hot.read_text().replace("lambda_max = 1.0", "lambda_max = 1.0\nalpha = 1e200"))
    out = tmp_path / "hot"
    assert main(["finetune", "--config", str(hot), "--pretrained", str(archive), "--out-dir", str(out)]) == 3
    assert (out / "metrics.csv").read_text().startswith("step,")


def test_sparkline():
    assert sparkline([1.0, 1.0]) == "▁▁"
    assert sparkline([0.0, 1.0]) == "▁█"
    assert len(sparkline(list(range(100)), width=40)) == 40
