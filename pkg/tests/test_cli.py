"""End-to-end tests for the command-line driver.

All commands run in-process through cli.main so exit codes and artifacts
can be asserted directly. Training invocations use a 1+1-epoch schedule on
tiny 64x64 datasets; they exercise plumbing, not convergence.
"""

import json
import shutil

import numpy as np
import pytest
from PIL import Image

from scribseg.cli import main
from scribseg.model import NetworkConfig, SegmentationNet, save_checkpoint

FAST_TRAIN = ["warmup_epochs=1", "main_epochs=1", "refresh_period=1"]


def _synth(out_dir, *extra):
    return main(["synth", "--out", str(out_dir), "--seed", "7",
                 "n_images=6", "val_count=2", "size=[64,64]",
                 "blobs_per_image=[3,6]", *extra])


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert _synth(out) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "--seed", "3", *FAST_TRAIN])
    assert rc == 0
    return out


# ----------------------------------------------------------------------- synth

def test_synth_writes_triples_and_echo(dataset_dir):
    manifest = (dataset_dir / "manifest.tsv").read_text().splitlines()
    assert len(manifest) == 6
    for stem in ("images", "masks", "scribbles"):
        assert len(list((dataset_dir / stem).glob("*.png"))) == 6
    echo = json.loads((dataset_dir / "config_echo.json").read_text())
    assert echo["synth"]["seed"] == 7
    assert echo["n_images"] == 6


def test_synth_rerun_byte_identical(dataset_dir, tmp_path):
    again = tmp_path / "again"
    assert _synth(again) == 0
    for rel in sorted(p.relative_to(dataset_dir)
                      for p in dataset_dir.rglob("*.png")):
        assert (again / rel).read_bytes() == (dataset_dir / rel).read_bytes()
    assert (again / "manifest.tsv").read_text() == \
        (dataset_dir / "manifest.tsv").read_text()


def test_synth_bad_seed_type_exit_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "seed=oops"])
    assert rc == 2
    assert "seed" in capsys.readouterr().err


def test_synth_unknown_key_exit_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "blob_count=4"])
    assert rc == 2
    assert "blob_count" in capsys.readouterr().err


def test_synth_val_count_bounds(tmp_path):
    rc = main(["synth", "--out", str(tmp_path / "x"),
               "n_images=3", "val_count=3"])
    assert rc == 2


# ----------------------------------------------------------------------- train

def test_train_artifacts(trained_dir):
    assert (trained_dir / "checkpoint.ckpt").exists()
    assert (trained_dir / "runlog.csv").exists()
    summary = json.loads((trained_dir / "run_summary.json").read_text())
    assert summary["epochs_completed"] == 2
    assert summary["manifest_hash"]
    assert len(summary["config"]["loss"]["scales"]) == 2


def test_train_missing_manifest_exit_2(tmp_path, capsys):
    rc = main(["train", "--manifest", str(tmp_path / "nope.tsv"),
               "--out", str(tmp_path / "run")])
    assert rc == 2
    assert "manifest" in capsys.readouterr().err


def test_train_unknown_config_key_exit_2(dataset_dir, tmp_path, capsys):
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(tmp_path / "run"), "warmup_epoch=1"])
    assert rc == 2
    assert "warmup_epoch" in capsys.readouterr().err


def test_train_no_contrastive_drops_columns(dataset_dir, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "--no-contrastive", *FAST_TRAIN])
    assert rc == 0
    header = (out / "runlog.csv").read_text().splitlines()[0]
    assert "contrast" not in header
    assert "scribble" in header and "pseudo" in header
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["config"]["loss"]["scales"] == []


def test_train_scale_selection_differs_only_in_scales(dataset_dir, tmp_path):
    outs = {}
    for tag, flags in (("one", ["--scales", "1"]), ("both", ["--scales", "1,4"])):
        out = tmp_path / tag
        rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
                   "--out", str(out), *flags, *FAST_TRAIN])
        assert rc == 0
        outs[tag] = json.loads((out / "run_summary.json").read_text())["config"]
    assert [s["factor"] for s in outs["one"]["loss"]["scales"]] == [1]
    assert [s["factor"] for s in outs["both"]["loss"]["scales"]] == [1, 4]
    for cfg in outs.values():
        cfg["loss"]["scales"] = None
    assert outs["one"] == outs["both"]


def test_train_unknown_scale_factor_exit_2(dataset_dir, tmp_path, capsys):
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(tmp_path / "run"), "--scales", "2"])
    assert rc == 2
    assert "factor" in capsys.readouterr().err


def test_train_pair_op_flag(dataset_dir, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "--pair-op", "xnor", *FAST_TRAIN])
    assert rc == 0
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["config"]["loss"]["pair_op"] == "xnor"


def test_train_dotted_override_reaches_nested_key(dataset_dir, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "loss.sample_cap=123", "filter.momentum=0.5",
               *FAST_TRAIN])
    assert rc == 0
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["config"]["loss"]["sample_cap"] == 123
    assert summary["config"]["filter"]["momentum"] == 0.5


def test_train_config_file_with_cli_override(dataset_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(
        {"train": {"warmup_epochs": 1, "main_epochs": 1, "refresh_period": 1,
                   "learning_rate": 0.002}}))
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cfg_path),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "learning_rate=0.005"])
    assert rc == 0
    echo = json.loads((out / "config_echo.json").read_text())
    assert echo["train"]["learning_rate"] == 0.005  # CLI wins over file


# ------------------------------------------------------------------------ eval

def test_eval_table_format(dataset_dir, trained_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "mDice / IoU" in stdout
    import re
    assert re.search(r"\d\.\d{4} / \d\.\d{4}", stdout)
    assert (out / "comparison.txt").exists()
    assert (out / "metrics_checkpoint.csv").exists()


def test_eval_two_checkpoints_two_rows(dataset_dir, trained_dir, tmp_path, capsys):
    second = tmp_path / "second.ckpt"
    shutil.copy(trained_dir / "checkpoint.ckpt", second)
    rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
               str(second), "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(tmp_path / "eval")])
    assert rc == 0
    table = (tmp_path / "eval" / "comparison.txt").read_text().splitlines()
    assert len(table) == 4  # header + rule + two rows
    assert table[2].split()[0] == "checkpoint"
    assert table[3].split()[0] == "second"


def test_eval_missing_checkpoint_exit_1(dataset_dir, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "ghost.ckpt"),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(tmp_path / "eval")])
    assert rc == 1
    assert "ghost.ckpt" in capsys.readouterr().err


def test_eval_plots_written(dataset_dir, trained_dir, tmp_path):
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "--plots"])
    assert rc == 0
    assert (out / "loss_curves.png").stat().st_size > 0
    assert (out / "metric_bars.png").stat().st_size > 0


# ---------------------------------------------------------------- export-pseudo

def test_export_pseudo_rasters(dataset_dir, trained_dir, tmp_path):
    out = tmp_path / "pseudo"
    rc = main(["export-pseudo", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out)])
    assert rc == 0
    full = sorted((out / "pseudo").glob("*.png"))
    assert len(full) == 4  # train split only
    arr = np.asarray(Image.open(full[0]))
    assert arr.shape == (64, 64)
    assert set(np.unique(arr)) <= {0, 128, 255}
    coarse = sorted((out / "pseudo_x4").glob("*.png"))
    assert len(coarse) == 4
    assert np.asarray(Image.open(coarse[0])).shape == (16, 16)


def test_export_pseudo_scale_flag(dataset_dir, trained_dir, tmp_path):
    out = tmp_path / "pseudo"
    rc = main(["export-pseudo", "--checkpoint", str(trained_dir / "checkpoint.ckpt"),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(out), "--scales", "4"])
    assert rc == 0
    assert not (out / "pseudo_x1").exists()
    assert (out / "pseudo_x4").exists()


def test_export_pseudo_without_tracker_state_exit_1(dataset_dir, tmp_path, capsys):
    bare = tmp_path / "bare.ckpt"
    save_checkpoint(bare, SegmentationNet(NetworkConfig(stage_widths=(4, 8))))
    rc = main(["export-pseudo", "--checkpoint", str(bare),
               "--manifest", str(dataset_dir / "manifest.tsv"),
               "--out", str(tmp_path / "out")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "tracker" in err and "train" in err  # says what to do instead


# ------------------------------------------------------------------------ misc

@pytest.mark.parametrize("command", ["synth", "train", "eval", "export-pseudo"])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0


@pytest.mark.parametrize("command,key", [
    ("synth", "noise_sigma = 0.02"),
    ("synth", "n_images = 80"),
    ("train", "learning_rate = 0.001"),
    ("train", "loss.sample_cap = 6000"),
    ("train", "filter.confidence = 0.8"),
    ("train", "network.stage_widths = (16, 32, 64, 128)"),
])
def test_help_lists_config_keys_with_defaults(command, key, capsys):
    with pytest.raises(SystemExit):
        main([command, "--help"])
    assert key in capsys.readouterr().out


def test_missing_subcommand_exit_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_malformed_override_exit_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "seed"])
    assert rc == 2
    assert "key=value" in capsys.readouterr().err
