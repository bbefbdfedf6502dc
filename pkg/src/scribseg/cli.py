"""Command-line pipeline driver.

Commands: synth (build a synthetic dataset), train (warm-up + main stage),
eval (score checkpoints into a comparison table), export-pseudo (dump
pseudo-label rasters from a trained checkpoint).

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DatasetManifest,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    synth_config_from_dict,
    write_dataset,
)
from .metrics import write_metrics_csv
from .model import load_checkpoint, network_from_checkpoint
from .pseudolabel import EmaTracker, downscale_labels, filter_pseudo, labels_to_raster
from .trainer import TrainConfig, Trainer, config_from_dict, config_to_dict, evaluate

__all__ = ["main", "build_parser", "ConfigError"]


class ConfigError(ValueError):
    """Bad configuration: wrong key, wrong type, failed validation."""


# ------------------------------------------------------------ config plumbing

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings may appear unquoted on the command line


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(config))  # deep copy, JSON-typed
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override below scalar key {p!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


_SECTIONS = ("synth", "train", "eval", "export_pseudo")


def _load_section(path: str | None, section: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    if section in doc:
        sub = doc[section]
    elif any(k in doc for k in _SECTIONS):
        sub = {}  # sectioned file without this command's section
    else:
        sub = doc  # flat file: the whole object is this command's section
    if not isinstance(sub, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    return sub


def _typecheck(obj, ref_obj=None, prefix="") -> list[str]:
    """Compare field values against the types of the dataclass defaults."""
    out = []
    if ref_obj is None:
        ref_obj = type(obj)()
    for f in dataclasses.fields(type(obj)):
        value = getattr(obj, f.name)
        ref = getattr(ref_obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(ref):
            out += _typecheck(value, ref, prefix=f"{key}.")
        elif isinstance(ref, bool):
            if not isinstance(value, bool):
                out.append(f"invalid value for key '{key}': expected bool")
        elif isinstance(ref, int):
            if not isinstance(value, int) or isinstance(value, bool):
                out.append(f"invalid value for key '{key}': expected int")
        elif isinstance(ref, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                out.append(f"invalid value for key '{key}': expected number")
        elif isinstance(ref, str):
            if not isinstance(value, str):
                out.append(f"invalid value for key '{key}': expected string")
        elif isinstance(ref, tuple):
            if not isinstance(value, tuple):
                out.append(f"invalid value for key '{key}': expected list")
            elif value and dataclasses.is_dataclass(value[0]):
                item_ref = ref[0] if ref else value[0]
                for i, item in enumerate(value):
                    out += _typecheck(item, item_ref, prefix=f"{key}[{i}].")
            elif ref and isinstance(ref[0], (int, float)):
                if not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in value):
                    out.append(f"invalid value for key '{key}': expected numbers")
    return out


def _check(config_obj):
    problems = _typecheck(config_obj)
    if not problems:  # validate() assumes well-typed fields
        problems = config_obj.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    return config_obj


def _defaults_lines(obj, prefix="") -> list[str]:
    lines = []
    for f in dataclasses.fields(type(obj)):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            lines += _defaults_lines(value, prefix=f"{key}.")
        else:
            lines.append(f"  {key} = {value!r}")
    return lines


def _echo_config(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.json").write_text(json.dumps(payload, indent=2) + "\n")


# ------------------------------------------------------------------- commands

_SYNTH_EXTRAS = {"n_images": 80, "val_count": 16, "stroke_width": 1,
                 "coverage": 0.01, "scribble_seed": 0}


def cmd_synth(args) -> int:
    section = _apply_overrides(_load_section(args.config, "synth"), args.override)
    extras = dict(_SYNTH_EXTRAS)
    for k in list(section):
        if k in extras:
            extras[k] = section.pop(k)
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        cfg = _check(synth_config_from_dict(section))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    for k in ("n_images", "val_count", "stroke_width", "scribble_seed"):
        if not isinstance(extras[k], int) or isinstance(extras[k], bool):
            raise ConfigError(f"invalid value for key '{k}': expected int")
    if not isinstance(extras["coverage"], (int, float)):
        raise ConfigError("invalid value for key 'coverage': expected number")
    n, val = extras["n_images"], extras["val_count"]
    if n < 1 or val < 0 or val >= n:
        raise ConfigError("need n_images >= 1 and 0 <= val_count < n_images")

    out_dir = Path(args.out)
    samples = generate_synthetic(cfg, n)
    splits = ["train"] * (n - val) + ["val"] * val
    manifest = write_dataset(samples, out_dir, stroke_width=extras["stroke_width"],
                             coverage=extras["coverage"],
                             scribble_seed=extras["scribble_seed"], split=splits)
    _echo_config(out_dir, {"synth": dataclasses.asdict(cfg), **extras})
    print(f"wrote {n} image/mask/scribble triples ({n - val} train / {val} val) "
          f"to {out_dir} (manifest hash {manifest.content_hash()[:12]})")
    return 0


def _select_scales(cfg: TrainConfig, args) -> TrainConfig:
    loss = cfg.loss
    if args.no_contrastive:
        loss = dataclasses.replace(loss, scales=())
    elif args.scales is not None:
        try:
            wanted = [int(s) for s in args.scales.split(",") if s]
        except ValueError as e:
            raise ConfigError(f"invalid --scales value {args.scales!r}: "
                              "expected comma-separated factors") from e
        by_factor = {s.factor: s for s in loss.scales}
        missing = [f for f in wanted if f not in by_factor]
        if missing:
            raise ConfigError(f"--scales names factor {missing[0]} but configured "
                              f"scales have factors {sorted(by_factor)}")
        loss = dataclasses.replace(loss,
                                   scales=tuple(by_factor[f] for f in wanted))
    if args.pair_op is not None:
        loss = dataclasses.replace(loss, pair_op=args.pair_op)
    return dataclasses.replace(cfg, loss=loss)


def _split_items(manifest: DatasetManifest):
    items = load_dataset(manifest)
    train = [it for it in items if it.split == "train"]
    val = [it for it in items if it.split == "val" and it.instances is not None]
    if not train:
        train = [it for it in items if it.scribbles is not None]
    return train, val or None


def cmd_train(args) -> int:
    section = _apply_overrides(_load_section(args.config, "train"), args.override)
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        cfg = config_from_dict(section)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    cfg = _select_scales(cfg, args)
    _check(cfg)

    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = DatasetManifest.read(manifest_path)
    train_items, val_items = _split_items(manifest)

    out_dir = Path(args.out)
    _echo_config(out_dir, {"train": config_to_dict(cfg)})
    trainer = Trainer(cfg, train_items, val_items)
    trainer.train()
    mhash = manifest.content_hash()
    ckpt = trainer.save(out_dir / "checkpoint.ckpt", manifest_hash=mhash)
    trainer.runlog.to_csv(out_dir / "runlog.csv")
    (out_dir / "run_summary.json").write_text(
        json.dumps(trainer.run_summary(mhash), indent=2) + "\n")
    last = trainer.runlog.records[-1]
    iou = "n/a" if last["val_iou"] is None else f"{last['val_iou']:.4f}"
    print(f"trained {trainer.epoch} epochs; final val IoU {iou}; "
          f"checkpoint {ckpt}")
    return 0


def _eval_items(manifest: DatasetManifest):
    items = load_dataset(manifest)
    val = [it for it in items if it.split == "val" and it.instances is not None]
    if val:
        return val
    scored = [it for it in items if it.instances is not None]
    if not scored:
        raise ValueError("manifest has no records with instance masks to score")
    return scored


def _comparison_table(rows: list[tuple[str, float, float]]) -> str:
    name_w = max(len("checkpoint"), *(len(r[0]) for r in rows))
    lines = [f"{'checkpoint':<{name_w}}  mDice / IoU",
             "-" * (name_w + 15)]
    for name, mdice, iou in rows:
        lines.append(f"{name:<{name_w}}  {mdice:.4f} / {iou:.4f}")
    return "\n".join(lines)


def _plot_artifacts(out_dir: Path, per_ckpt: list[tuple[str, dict | None]],
                    table_rows: list[tuple[str, float, float]]):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, runlog in per_ckpt:
        if not runlog:
            continue
        epochs = [r["epoch"] for r in runlog["records"]]
        totals = [r["total"] for r in runlog["records"]]
        ax.plot(epochs, totals, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r[0] for r in table_rows]
    x = np.arange(len(names))
    ax.bar(x - 0.2, [r[1] for r in table_rows], width=0.4, label="mDice")
    ax.bar(x + 0.2, [r[2] for r in table_rows], width=0.4, label="IoU")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "metric_bars.png", dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    items = _eval_items(DatasetManifest.read(manifest_path))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    table_rows, per_ckpt = [], []
    for ckpt_path in args.checkpoint:
        ckpt_path = Path(ckpt_path)
        if not ckpt_path.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
        payload = load_checkpoint(ckpt_path)
        net = network_from_checkpoint(payload)
        rows, agg = evaluate(net, items, threshold=args.threshold)
        write_metrics_csv(rows, out_dir / f"metrics_{ckpt_path.stem}.csv")
        table_rows.append((ckpt_path.stem, agg.mdice, agg.iou))
        per_ckpt.append((ckpt_path.stem, payload["extra"].get("runlog")))

    table = _comparison_table(table_rows)
    (out_dir / "comparison.txt").write_text(table + "\n")
    _echo_config(out_dir, {"eval": {"checkpoints": [str(c) for c in args.checkpoint],
                                    "manifest": str(manifest_path),
                                    "threshold": args.threshold}})
    if args.plots:
        _plot_artifacts(out_dir, per_ckpt, table_rows)
    print(table)
    return 0


def cmd_export_pseudo(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    payload = load_checkpoint(ckpt_path)
    extra = payload.get("extra", {})
    if "trackers" not in extra or "train_config" not in extra:
        raise FileNotFoundError(
            f"{ckpt_path.name} holds no tracker state; train with the `train` "
            "command first, then export from its checkpoint")
    cfg = config_from_dict(extra["train_config"])

    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = DatasetManifest.read(manifest_path)
    train_items, _ = _split_items(manifest)
    trackers = [EmaTracker.from_state(s) for s in extra["trackers"]]
    if len(trackers) != len(train_items):
        raise FileNotFoundError(
            f"checkpoint tracks {len(trackers)} images but the manifest has "
            f"{len(train_items)} training records; point --manifest at the "
            "dataset the checkpoint was trained on")

    if args.scales is not None:
        try:
            factors = [int(s) for s in args.scales.split(",") if s]
        except ValueError as e:
            raise ConfigError(f"invalid --scales value {args.scales!r}: "
                              "expected comma-separated factors") from e
    else:
        factors = [s.factor for s in cfg.loss.scales]

    out_dir = Path(args.out)
    n_written = 0
    for item, tracker in zip(train_items, trackers):
        pseudo = filter_pseudo(tracker, item.scribbles, cfg.filter.confidence)
        dest = out_dir / "pseudo" / f"{item.name}.png"
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(labels_to_raster(pseudo.labels)).save(dest)
        n_written += 1
        for f in factors:
            pooled = downscale_labels(pseudo, item.scribbles, f,
                                      cfg.loss.bg_thresh, cfg.loss.fg_thresh)
            dest = out_dir / f"pseudo_x{f}" / f"{item.name}.png"
            dest.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(labels_to_raster(pooled.labels)).save(dest)
    _echo_config(out_dir, {"export_pseudo": {"checkpoint": str(ckpt_path),
                                             "manifest": str(manifest_path),
                                             "scales": factors}})
    print(f"wrote pseudo-label rasters for {n_written} images "
          f"(downscale factors {factors}) to {out_dir}")
    return 0


# --------------------------------------------------------------------- parser

def _epilog_for(*sections) -> str:
    lines = ["config keys and defaults:"]
    for title, obj, extras in sections:
        lines.append(f"[{title}]")
        lines += _defaults_lines(obj)
        for k, v in (extras or {}).items():
            lines.append(f"  {k} = {v!r}")
    lines.append("override any key with key=value (dotted keys reach nested "
                 "sections, values parsed as JSON)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scribseg",
        description="Scribble-supervised segmentation pipeline: synthesize data, "
                    "train with pseudo-labels and contrastive regularization, "
                    "evaluate, export pseudo-labels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="scribseg-out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest.tsv")
        p.add_argument("override", nargs="*", metavar="key=value",
                       help="config overrides")

    p_synth = sub.add_parser(
        "synth", help="generate a synthetic scribble dataset",
        epilog=_epilog_for(("synth", SynthConfig(), _SYNTH_EXTRAS)),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser(
        "train", help="run warm-up and main training stages",
        epilog=_epilog_for(("train", TrainConfig(), None)),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p_train, manifest=True)
    p_train.add_argument("--no-contrastive", action="store_true",
                         help="drop both contrastive terms (plain baseline)")
    p_train.add_argument("--scales", default=None,
                         help="comma-separated downscale factors to keep, e.g. 1 or 1,4")
    p_train.add_argument("--pair-op", default=None, choices=("or", "and", "xnor"),
                         help="pair target operator for the contrastive terms")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser(
        "eval", help="score checkpoints and print an mDice / IoU table",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p_eval.add_argument("--checkpoint", nargs="+", required=True,
                        help="one or more checkpoint files")
    p_eval.add_argument("--manifest", required=True, help="dataset manifest.tsv")
    p_eval.add_argument("--out", default="scribseg-out", help="output directory")
    p_eval.add_argument("--threshold", type=float, default=0.5,
                        help="foreground probability threshold")
    p_eval.add_argument("--plots", action="store_true",
                        help="write loss-curve and metric-bar plot files")
    p_eval.set_defaults(func=cmd_eval)

    p_exp = sub.add_parser(
        "export-pseudo", help="write pseudo-label rasters from a checkpoint",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p_exp.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p_exp.add_argument("--manifest", required=True, help="dataset manifest.tsv")
    p_exp.add_argument("--out", default="scribseg-out", help="output directory")
    p_exp.add_argument("--scales", default=None,
                       help="comma-separated downscale factors to export")
    p_exp.set_defaults(func=cmd_export_pseudo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
