import json

import numpy as np
import pytest

from roimae.checkpoint import load_checkpoint
from roimae.cli import main
from roimae.config import ExperimentConfig, load_config, parse_config, to_ini
from roimae.errors import ConfigError

TINY = """
[experiment]
seed = 3
manifest = data/manifest.csv
strategies = none, mask_roi
fractions = 1.0
k = 2

[model]
num_rois = 4
window_len = 16
hidden_dim = 8
num_heads = 2
num_layers = 1
ffn_dim = 16
recon_hidden = 8
clf_hidden = 8

[pretrain]
steps = 10
batch = 4
lr = 0.003
window = 16
crops_per_subject = 2
log_every = 5

[finetune]
batch = 8
lr = 0.01
max_epochs = 2
patience = 2
window = 16
stride = 8
crops_per_subject = 2

[synth]
num_subjects = 8
num_rois = 4
length = 40
block_size = 2
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.ini").write_text(TINY)
    assert main(["synth", "--config", str(tmp_path / "cfg.ini"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "cfg.ini"), "--out", str(workdir / "run"), *args[1:]])


def test_synth_writes_dataset_and_is_reproducible(workdir, tmp_path):
    files = sorted(p.name for p in (workdir / "data" / "series").iterdir())
    assert len(files) == 8
    assert (workdir / "data" / "manifest.csv").read_text().startswith("subject_id,label,site,series_path\n")
    main(["synth", "--config", str(workdir / "cfg.ini"), "--out", str(tmp_path / "again")])
    for p in sorted((workdir / "data").rglob("*.csv")):
        assert p.read_bytes() == (tmp_path / "again" / p.relative_to(workdir / "data")).read_bytes()


def test_synth_unwritable_output(tmp_path):
    (tmp_path / "cfg.ini").write_text(TINY)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--config", str(tmp_path / "cfg.ini"), "--out", str(blocker / "sub")]) == 3
    assert not (blocker.parent / "sub").exists()


def test_pretrain_artifacts_and_resume(workdir):
    assert run(workdir, "pretrain", "--mask", "mask_time") == 0
    out = workdir / "run" / "pretrain" / "mask_time"
    ck = load_checkpoint(out / "ckpt.bin")
    assert ck.metadata["step"] == 10 and ck.metadata["strategy"] == "mask_time"
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and [l.split(",")[0] for l in lines[1:]] == ["1", "5", "10"]
    assert (out / "config.resolved.ini").exists()
    cfg = workdir / "cfg.ini"
    cfg.write_text(TINY.replace("steps = 10", "steps = 15"))
    assert run(workdir, "pretrain", "--mask", "mask_time", "--resume") == 0
    assert load_checkpoint(out / "ckpt.bin").metadata["step"] == 15
    lines = (out / "loss.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "5", "10", "11", "15"]


def test_pretrain_refuses_none(workdir, capsys):
    assert run(workdir, "pretrain", "--mask", "none") == 2
    assert "mask" in capsys.readouterr().err


def test_pretrain_missing_manifest(workdir, capsys):
    assert run(workdir, "pretrain", "--manifest", str(workdir / "nope.csv")) == 3
    assert "nope.csv" in capsys.readouterr().err


def test_pretrain_is_byte_reproducible(workdir):
    run(workdir, "pretrain")
    a = (workdir / "run" / "pretrain" / "mask_roi" / "ckpt.bin").read_bytes()
    run(workdir, "pretrain")
    assert (workdir / "run" / "pretrain" / "mask_roi" / "ckpt.bin").read_bytes() == a


def test_finetune_and_eval(workdir):
    run(workdir, "pretrain")
    ck = workdir / "run" / "pretrain" / "mask_roi" / "ckpt.bin"
    assert run(workdir, "finetune", "--checkpoint", str(ck)) == 0
    model = workdir / "run" / "finetune" / "mask_roi" / "model.bin"
    assert load_checkpoint(model).metadata["stage"] == "finetune"
    hist = (workdir / "run" / "finetune" / "mask_roi" / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_auc,val_loss" and len(hist) >= 2
    assert run(workdir, "eval", "--mode", "classify", "--checkpoint", str(model)) == 0
    doc = json.loads((workdir / "run" / "eval" / "metrics.json").read_text())
    assert {"auc", "accuracy", "sensitivity", "specificity"} <= set(doc)
    assert (workdir / "run" / "eval" / "roc_points.csv").read_text().startswith("fpr,tpr,threshold\n")
    assert run(workdir, "eval", "--mode", "recon", "--checkpoint", str(ck)) == 0
    rows = (workdir / "run" / "eval" / "recon.csv").read_text().splitlines()
    assert rows[0] == "strategy,mse_full,mse_masked,n_samples"
    assert [r.split(",")[0] for r in rows[1:]] == ["mask_roi", "mask_time", "mask_random"]


def test_finetune_scratch(workdir):
    assert run(workdir, "finetune", "--mask", "none") == 0
    ck = load_checkpoint(workdir / "run" / "finetune" / "none" / "model.bin")
    assert ck.model_config.num_layers == 2 and ck.model_config.num_heads == 4


def test_eval_missing_checkpoint_and_roi_mismatch(workdir, tmp_path):
    assert run(workdir, "eval", "--checkpoint", str(tmp_path / "missing.bin")) == 3
    other = TINY.replace("num_rois = 4\nwindow_len", "num_rois = 5\nwindow_len").replace(
        "[synth]\nnum_subjects = 8\nnum_rois = 4", "[synth]\nnum_subjects = 8\nnum_rois = 5")
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "cfg.ini").write_text(other)
    main(["synth", "--config", str(tmp_path / "o" / "cfg.ini"), "--out", str(tmp_path / "o" / "data")])
    main(["pretrain", "--config", str(tmp_path / "o" / "cfg.ini"), "--out", str(tmp_path / "o" / "run")])
    ck = tmp_path / "o" / "run" / "pretrain" / "mask_roi" / "ckpt.bin"
    assert run(workdir, "eval", "--mode", "recon", "--checkpoint", str(ck)) == 2


def test_cv_summary_reproducible(workdir):
    assert run(workdir, "cv") == 0
    cv = workdir / "run" / "cv"
    rows = json.loads((cv / "summary.json").read_text())
    assert {(r["strategy"], r["fraction"]) for r in rows} == {("none", 1.0), ("mask_roi", 1.0)}
    assert all(r["folds"] == 2 for r in rows)
    for f in (0, 1):
        doc = json.loads((cv / f"fold{f}" / "mask_roi" / "frac1" / "metrics.json").read_text())
        assert doc["fold"] == f and doc["strategy"] == "mask_roi"
    first = (cv / "summary.json").read_bytes()
    assert run(workdir, "cv") == 0
    assert (cv / "summary.json").read_bytes() == first


def test_cv_five_fraction_rows(workdir):
    cfg = TINY.replace("strategies = none, mask_roi", "strategies = none").replace(
        "fractions = 1.0", "fractions = 0.2, 0.4, 0.6, 0.8, 1.0").replace("num_subjects = 8", "num_subjects = 40")
    (workdir / "cfg.ini").write_text(cfg)
    main(["synth", "--config", str(workdir / "cfg.ini"), "--out", str(workdir / "data")])
    assert run(workdir, "cv", "--fractions", "1.0") == 0
    rows = json.loads((workdir / "run" / "cv" / "summary.json").read_text())
    assert len(rows) == 1
    assert run(workdir, "cv") == 0
    rows = json.loads((workdir / "run" / "cv" / "summary.json").read_text())
    assert sorted(r["fraction"] for r in rows) == [0.2, 0.4, 0.6, 0.8, 1.0]
    (workdir / "cfg.ini").write_text(cfg.replace("num_subjects = 40", "num_subjects = 20"))
    main(["synth", "--config", str(workdir / "cfg.ini"), "--out", str(workdir / "data")])
    assert run(workdir, "cv") == 2


def test_cv_leakage_exit_code(workdir, monkeypatch):
    import roimae.experiment as ex
    real = ex.make_nested_folds

    def corrupt(*a, **kw):
        plan = real(*a, **kw)
        plan.folds[0].inner[0].train.append(plan.folds[0].test[0])
        return plan

    monkeypatch.setattr(ex, "make_nested_folds", corrupt)
    assert run(workdir, "cv") == 4


def test_missing_seed_is_config_error(tmp_path):
    (tmp_path / "cfg.ini").write_text(TINY.replace("seed = 3\n", ""))
    assert main(["synth", "--config", str(tmp_path / "cfg.ini"), "--out", str(tmp_path / "d")]) == 0
    assert main(["pretrain", "--config", str(tmp_path / "cfg.ini"), "--out", str(tmp_path / "r")]) == 2
    assert main(["pretrain", "--config", str(tmp_path / "cfg.ini"), "--seed", "1",
                 "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "r")]) == 0


def test_config_round_trip_and_errors(tmp_path):
    cfg = parse_config(TINY, tmp_path)
    assert cfg.experiment.manifest == str(tmp_path / "data/manifest.csv")
    assert cfg.model.hidden_dim == 8 and cfg.pretrain.lr == 0.003 and cfg.experiment.fractions == (1.0,)
    again = parse_config(to_ini(cfg), tmp_path)
    assert again == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError, match="unknown config sections"):
        parse_config("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config("[model]\nhidden_dim = big\n")
    with pytest.raises(ConfigError):
        parse_config("[pretrain]\nstrategy = none\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
    assert parse_config("[finetune]\nfreeze_encoder = no\n").finetune.freeze_encoder is False
    assert ExperimentConfig().scratch_finetune is None


def test_bad_flag_values(workdir):
    with pytest.raises(SystemExit) as e:
        main(["cv", "--fractions", "a,b"])
    assert e.value.code == 2
    assert run(workdir, "cv", "--jobs", "0") == 2


def test_pretrain_keep_best_val_flag(workdir):
    (workdir / "cfg.ini").write_text(TINY.replace("log_every = 5", "log_every = 5\nkeep_best_val = yes"))
    assert run(workdir, "pretrain") == 0
    meta = load_checkpoint(workdir / "run" / "pretrain" / "mask_roi" / "ckpt.bin").metadata
    assert "best_val_mse" in meta and meta["step"] == 10
