import json
from pathlib import Path

import numpy as np
import pytest

from lusphase.cli import main
from lusphase.config import (RunConfig, TrainConfig, derive_seed, load_config, merge_overrides,
                             parse_override, write_run_record)
from lusphase.errors import ConfigError
from lusphase.imgcore import PFM, load_image, save_image
from lusphase.synth import make_synthetic_dataset

# Small enough that a whole fold trains in well under a second.
TINY = ["--set", "pipeline.crop_side=32", "--set", "pipeline.side=32", "--set", "frst.radii=[2,4]",
        "--set", "model.stage_depths=[2,2,2]", "--set", "model.initial_depth=2",
        "--set", "model.branch_kernels=[3]", "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = make_synthetic_dataset(root, n_subjects=5, per_subject=2, side=40, seed=3)
    return root, manifest


def run(*argv):
    return main([str(a) for a in argv])


def read_run(d):
    return json.loads((Path(d) / "run.json").read_text())


# --------------------------------------------------------------------------- config

def test_defaults_round_trip():
    cfg = RunConfig()
    assert cfg.pipeline.crop_side == 334 and cfg.pipeline.out_side == 512
    assert cfg.train.lr == 1e-5 and cfg.train.effective_lr == 1e-5
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_toml_file_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 7\n[train]\nepochs = 3\nlr = 1e-5\nlr_scale = 100.0\n'
                    '[fusion]\nmode = "late"\ninputs = ["us", "e1", "e2"]\n')
    cfg = load_config(path, ["train.epochs=9", "frst.radii=[3,5]"])
    assert cfg.seed == 7 and cfg.train.epochs == 9
    assert cfg.train.effective_lr == pytest.approx(1e-3)
    assert cfg.fusion.mode == "late" and cfg.fusion.inputs == ("us", "e1", "e2")
    assert cfg.pipeline.frst.radii == (3, 5)


def test_batch_norm_switch():
    assert RunConfig().model_config(0).batch_norm is False
    assert load_config(None, ["model.batch_norm=true"]).model_config(0).batch_norm is True


def test_parse_override_values():
    assert parse_override("train.lr=1e-3") == (["train", "lr"], 1e-3)
    assert parse_override("fusion.mode=late") == (["fusion", "mode"], "late")
    assert parse_override("enhance.axial_flip=true") == (["enhance", "axial_flip"], True)
    with pytest.raises(ConfigError):
        parse_override("train.lr")


def test_merge_does_not_mutate():
    doc = {"train": {"epochs": 1}}
    merged = merge_overrides(doc, ["train.epochs=2"])
    assert doc["train"]["epochs"] == 1 and merged["train"]["epochs"] == 2
    with pytest.raises(ConfigError):
        merge_overrides({"seed": 1}, ["seed.x=2"])


@pytest.mark.parametrize("override", ["train.epoch=3", "bogus.key=1", "pipeline.sides=4",
                                      "fusion.mode=fused", "train.batch_size=0", "pipeline.side=30"])
def test_strict_keys_and_values(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_derive_seed():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, 1, f) for f in range(5)} | {derive_seed(1, 1, 0)}) == 6


def test_run_record(tmp_path):
    cfg = RunConfig(train=TrainConfig(lr_scale=100.0))
    doc = json.loads(write_run_record(tmp_path, "train", cfg, {"fold": 2}).read_text())
    assert doc["command"] == "train" and doc["fold"] == 2
    assert doc["config"]["train"]["lr_scale"] == 100.0
    assert RunConfig.from_dict(doc["config"]) == cfg


# --------------------------------------------------------------------------- usage

def test_missing_required_flag(tmp_path, capsys):
    assert run("lpe", "--out", tmp_path) == 1
    assert "--in" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run("transmogrify") == 1
    assert main([]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "crossval" in capsys.readouterr().out


def test_bad_input_directory(tmp_path, capsys):
    assert run("lpe", "--in", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "not found" in capsys.readouterr().err


def test_bad_override_exit_code(tmp_path, capsys):
    assert run("lpe", "--in", tmp_path, "--out", tmp_path / "o", "--set", "phase.nope=1") == 1
    assert "nope" in capsys.readouterr().err


def test_crossval_requires_paths(tmp_path, capsys):
    assert run("crossval", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "--in" in err and "--manifest" in err


# --------------------------------------------------------------------------- stages

def test_image_stages_chain(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        save_image(rng.random((40, 40)), src / f"f{i}.pfm", PFM)
    assert run("lpe", "--in", src, "--out", tmp_path / "lpe", "--crop", 32, "--scales", 2) == 0
    assert read_run(tmp_path / "lpe")["config"]["phase"]["num_scales"] == 2
    lpe = load_image(tmp_path / "lpe" / "f0_lpe.pfm")
    assert lpe.shape == (32, 32) and lpe.max() == pytest.approx(1.0) and lpe.min() >= 0

    assert run("enhance", "--in", tmp_path / "lpe", "--out", tmp_path / "enh", "--normalize",
               "--eta", 0.5) == 0
    assert read_run(tmp_path / "enh")["config"]["enhance"]["eta"] == 0.5
    e1 = load_image(tmp_path / "enh" / "f0_e1.pfm")
    assert e1.min() == 0.0 and e1.max() == 1.0

    assert run("frst", "--in", tmp_path / "enh", "--out", tmp_path / "frst", "--radii", "2,3") == 0
    names = sorted(p.name for p in (tmp_path / "frst").glob("*.pfm"))
    assert names == ["f0_s1.pfm", "f0_s2.pfm", "f1_s1.pfm", "f1_s2.pfm"]
    assert json.loads((tmp_path / "frst" / "frst.json").read_text())["params"]["radii"] == [2, 3]


def test_lpe_jobs_match_serial(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rng = np.random.default_rng(5)
    for i in range(3):
        save_image(rng.random((24, 24)), src / f"f{i}.pfm", PFM)
    assert run("lpe", "--in", src, "--out", tmp_path / "a") == 0
    assert run("lpe", "--in", src, "--out", tmp_path / "b", "--jobs", 2) == 0
    for i in range(3):
        name = f"f{i}_lpe.pfm"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_per_fold_workflow(synth, tmp_path):
    root, manifest = synth
    feats, folds, fold0 = tmp_path / "feats", tmp_path / "split", tmp_path / "fold0"
    assert run("featurize", "--in", root, "--manifest", manifest, "--out", feats, *TINY) == 0
    assert len(list(feats.glob("*_us.pfm"))) == 10
    assert run("split", "--features", feats / "features.json", "--out", folds, "--k", 5, "--seed", 4) == 0
    plan = json.loads((folds / "folds.json").read_text())
    assert plan["k"] == 5 and read_run(folds)["config"]["seed"] == 4

    args = ["--features", feats / "features.json", "--folds", folds / "folds.json", "--fold", 0]
    assert run("train", *args, "--out", fold0, "--epochs", 2, "--lr-scale", 100, "--side", 32,
               "--evaluate", *TINY) == 0
    rec = read_run(fold0)
    assert rec["fold"] == 0 and rec["config"]["train"]["lr_scale"] == 100
    assert (fold0 / "model.ckpt").is_file() and (fold0 / "metrics.json").is_file()
    log_rows = (fold0 / "train_log.csv").read_text().splitlines()
    assert log_rows[0] == "step,epoch,loss,train_acc,val_acc" and len(log_rows) == 1 + 2 * 2

    ev = tmp_path / "eval"
    assert run("evaluate", *args, "--checkpoint", fold0 / "model.ckpt", "--out", ev, *TINY) == 0
    assert (ev / "predictions.csv").read_bytes() == (fold0 / "predictions.csv").read_bytes()
    assert read_run(ev)["checkpoint_step"] == 4


def test_split_from_manifest(synth, tmp_path):
    root, manifest = synth
    assert run("split", "--in", root, "--manifest", manifest, "--out", tmp_path, "--k", 5) == 0
    assert len(json.loads((tmp_path / "folds_balance.json").read_text())) == 5
    assert run("split", "--out", tmp_path / "x") == 1


def test_crossval_and_report(synth, tmp_path):
    root, manifest = synth
    out = tmp_path / "cv"
    argv = ["crossval", "--in", root, "--manifest", manifest, "--out", out, "--epochs", 1, *TINY]
    assert run(*argv) == 0
    rows = (out / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 5 + 1 and rows[-1].startswith("mean")
    assert read_run(out)["command"] == "crossval"
    (out / "report.csv").unlink()
    assert run("report", "--in", out) == 0
    assert (out / "report.csv").read_text().splitlines() == rows


def test_crossval_is_byte_reproducible(synth, tmp_path):
    root, manifest = synth
    for name in ("a", "b"):
        assert run("crossval", "--in", root, "--manifest", manifest, "--out", tmp_path / name,
                   "--epochs", 1, "--seed", 11, *TINY) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.suffix in (".pfm", ".ckpt", ".csv") or p.name == "folds.json")
    assert any(f.suffix == ".ckpt" for f in files)
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
