"""Two-stage training driver: scribble-only warm-up, then the main stage
with pseudo-label supervision and multiscale contrastive regularization.
Owns run logging, checkpoint/resume, and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .core import LossConfig, PseudoLabelMap, ScaleSpec, ScribbleMap
from .data import DatasetItem
from .metrics import MetricRow, aggregate_rows, score_image
from .model import (
    NetworkConfig,
    ProjectionHead,
    ProjectionHeadConfig,
    SegmentationNet,
    factor_for_stage,
    load_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
    tap_channels,
)
from .pseudolabel import EmaTracker, FilterConfig, downscale_labels, filter_pseudo

__all__ = [
    "TrainConfig",
    "RunLog",
    "Trainer",
    "evaluate",
    "config_to_dict",
    "config_from_dict",
]

# seed-stream tags so every random decision has its own deterministic stream
_STREAM_ORDER, _STREAM_AUG, _STREAM_SAMPLE = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on; serialized verbatim into
    checkpoints and run summaries so runs are reproducible from the echo."""

    network: NetworkConfig = NetworkConfig()
    loss: LossConfig = LossConfig()
    filter: FilterConfig = FilterConfig()
    warmup_epochs: int = 30
    main_epochs: int = 70
    batch_size: int = 4
    learning_rate: float = 1e-3
    refresh_period: int = 5
    projection_channels: int = 32
    projection_depth: int = 2
    # per-class pixel budget for pair sampling each step; keeps CPU step
    # time bounded while loss.sample_cap stays the semantic ceiling
    pair_pixel_budget: int = 256
    augment: bool = True
    eval_threshold: float = 0.5
    seed: int = 0
    device: str = "cpu"

    def validate(self) -> list[str]:
        out = []
        out += self.network.validate()
        out += self.loss.validate()
        out += self.filter.validate()
        if self.warmup_epochs < 1 or self.main_epochs < 1:
            out.append("epochs must be at least 1")
        if self.refresh_period < 1:
            out.append("refresh period must be at least 1")
        elif self.refresh_period > self.main_epochs:
            out.append("refresh period exceeds main epochs")
        if self.batch_size < 1:
            out.append("batch size must be at least 1")
        if self.learning_rate <= 0:
            out.append("learning rate must be positive")
        if self.projection_channels < 1 or self.projection_depth < 1:
            out.append("projection head shape must be positive")
        if self.pair_pixel_budget < 1:
            out.append("pair pixel budget must be at least 1")
        if not 0.0 < self.eval_threshold < 1.0:
            out.append("eval threshold must be in (0,1)")
        return out

    def loss_keys(self) -> tuple[str, ...]:
        keys = ["scribble", "pseudo"]
        keys += [f"contrast{k + 1}_x{s.factor}" for k, s in enumerate(self.loss.scales)]
        return tuple(keys + ["total"])


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, d: dict, **converted):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown config key {unknown[0]!r} for {cls.__name__}")
    kwargs = {k: v for k, v in d.items() if k not in converted}
    return cls(**kwargs, **converted)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    net_d = dict(d.pop("network", {}))
    if "stage_widths" in net_d:
        net_d["stage_widths"] = tuple(net_d["stage_widths"])
    loss_d = dict(d.pop("loss", {}))
    if "scales" in loss_d:
        loss_d["scales"] = tuple(
            _build(ScaleSpec, dict(s)) if isinstance(s, dict) else s
            for s in loss_d["scales"])
    return _build(
        TrainConfig, d,
        network=_build(NetworkConfig, net_d),
        loss=_build(LossConfig, loss_d),
        filter=_build(FilterConfig, dict(d.pop("filter", {}))),
    )


@dataclass
class RunLog:
    """Ordered per-epoch records with a config-determined column set."""

    loss_keys: tuple[str, ...]
    records: list[dict] = field(default_factory=list)

    FIXED_PRE = ("epoch", "stage")
    FIXED_POST = ("val_iou", "val_mdice", "pseudo_count", "skipped_terms", "wall_time")

    @property
    def columns(self) -> tuple[str, ...]:
        return self.FIXED_PRE + self.loss_keys + self.FIXED_POST

    def append(self, record: dict):
        missing = set(self.columns) - set(record)
        if missing:
            raise ValueError(f"incomplete record: missing {sorted(missing)}")
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.records.append({k: record[k] for k in self.columns})

    def validate(self) -> list[str]:
        out = []
        epochs = [r["epoch"] for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            out.append("epoch indices not increasing")
        for r in self.records:
            if set(r) != set(self.columns):
                out.append(f"record {r.get('epoch')} incomplete")
        return out

    def core_records(self) -> list[dict]:
        """Records with wall time dropped, for determinism comparisons."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for r in self.records:
                writer.writerow(["" if r[c] is None else r[c] for c in self.columns])
        return path


def _dihedral_np(arr: np.ndarray, k: int, inverse: bool = False) -> np.ndarray:
    """One of the 8 axis-aligned symmetries on the trailing two axes."""
    r, f = k % 4, k // 4
    if not inverse:
        out = np.rot90(arr, r, axes=(-2, -1))
        if f:
            out = np.flip(out, axis=-1)
    else:
        out = np.flip(arr, axis=-1) if f else arr
        out = np.rot90(out, -r, axes=(-2, -1))
    return np.ascontiguousarray(out)


def evaluate(net: SegmentationNet, items: list[DatasetItem], threshold: float = 0.5,
             batch_size: int = 4, device: str = "cpu") -> tuple[list[MetricRow], MetricRow]:
    """Per-image IoU/mDice rows plus the aggregate row for a trained net."""
    was_training = net.training
    net.eval()
    rows = []
    try:
        with torch.no_grad():
            for start in range(0, len(items), batch_size):
                chunk = items[start:start + batch_size]
                x = torch.stack([torch.from_numpy(np.array(it.image.pixels))
                                 for it in chunk]).to(device)
                probs, _ = net(x)
                for it, p in zip(chunk, probs):
                    if it.instances is None:
                        raise ValueError(f"{it.name}: no ground-truth instances to score")
                    rows.append(score_image(it.name, p.cpu().numpy(), it.instances,
                                            threshold))
    finally:
        net.train(was_training)
    return rows, aggregate_rows(rows)


class Trainer:
    """Owns one training run end to end.

    Construction builds a fresh seeded network; `train()` runs warm-up plus
    main stage (resume-aware), `save()`/`resume()` round-trip the full state.
    """

    def __init__(self, cfg: TrainConfig, train_items: list[DatasetItem],
                 val_items: list[DatasetItem] | None = None):
        problems = cfg.validate()
        if problems:
            raise ValueError("; ".join(problems))
        if not train_items:
            raise ValueError("training set is empty")
        for it in train_items:
            if it.scribbles is None:
                raise ValueError(f"{it.name}: training item has no scribbles")
        shapes = {(it.image.height, it.image.width) for it in train_items}
        if len(shapes) > 1 and cfg.batch_size > 1:
            raise ValueError("variable image sizes require batch_size 1")

        self.cfg = cfg
        self.train_items = list(train_items)
        self.val_items = list(val_items) if val_items else None
        self.device = torch.device(cfg.device)

        torch.manual_seed(cfg.seed)
        self.net = SegmentationNet(cfg.network).to(self.device)
        self.heads: dict[int, ProjectionHead] = {}
        for scale in cfg.loss.scales:
            declared, actual = scale.factor, factor_for_stage(cfg.network, scale.tap)
            if declared != actual:
                raise ValueError(
                    f"scale at tap {scale.tap}: declared factor {declared} but the "
                    f"decoder stage produces factor {actual}")
            if scale.tap not in self.heads:
                self.heads[scale.tap] = ProjectionHead(ProjectionHeadConfig(
                    in_channels=tap_channels(cfg.network, scale.tap),
                    out_channels=cfg.projection_channels,
                    depth=cfg.projection_depth)).to(self.device)
        params = list(self.net.parameters())
        for head in self.heads.values():
            params += list(head.parameters())
        self.optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

        n = len(self.train_items)
        self.trackers = [EmaTracker(momentum=cfg.filter.momentum) for _ in range(n)]
        self.pseudo = [None] * n
        self.pooled = [None] * n
        self.epoch = 0
        self.warmup_emitted = False
        self.refresh_events: list[int] = []
        self.runlog = RunLog(loss_keys=cfg.loss_keys())
        self._square = all(it.image.height == it.image.width for it in self.train_items)

    # ---------------------------------------------------------------- seeds

    def _rng(self, stream: int, *key: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, stream, *key]))

    def _sample_seed(self, epoch: int, step: int, slot: int) -> int:
        return int(self._rng(_STREAM_SAMPLE, epoch, step, slot)
                   .integers(0, 2**31 - 1))

    # ------------------------------------------------------------- training

    def _aug_code(self, epoch: int, item_idx: int) -> int:
        if not self.cfg.augment:
            return 0
        hi = 8 if self._square else 2
        return int(self._rng(_STREAM_AUG, epoch, item_idx).integers(0, hi))

    def _set_train(self, flag: bool):
        self.net.train(flag)
        for head in self.heads.values():
            head.train(flag)

    def _refresh_pseudo(self, main_index: int):
        cfg = self.cfg
        for i, item in enumerate(self.train_items):
            self.pseudo[i] = filter_pseudo(self.trackers[i], item.scribbles,
                                           cfg.filter.confidence)
            self.pooled[i] = {
                scale.factor: downscale_labels(self.pseudo[i], item.scribbles,
                                               scale.factor, cfg.loss.bg_thresh,
                                               cfg.loss.fg_thresh)
                for scale in cfg.loss.scales
            }
        self.refresh_events.append(main_index)

    def _epoch_pass(self, stage: str) -> dict:
        cfg = self.cfg
        epoch = self.epoch + 1
        is_main = stage == "main"
        taps = tuple(sorted(self.heads)) if is_main else ()
        n = len(self.train_items)
        order = self._rng(_STREAM_ORDER, epoch).permutation(n)
        effective_cap = min(cfg.loss.sample_cap, cfg.pair_pixel_budget)

        sums: dict[str, float] = defaultdict(float)
        skipped = 0
        canonical_probs: list[np.ndarray | None] = [None] * n
        self._set_train(True)
        t0 = time.perf_counter()

        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idxs = order[start:start + cfg.batch_size].tolist()
            codes = [self._aug_code(epoch, i) for i in idxs]
            x = torch.stack([
                torch.from_numpy(_dihedral_np(np.array(self.train_items[i].image.pixels), k))
                for i, k in zip(idxs, codes)
            ]).to(self.device)
            scribbles = []
            for i, k in zip(idxs, codes):
                s = self.train_items[i].scribbles
                scribbles.append(ScribbleMap(fg=_dihedral_np(np.array(s.fg), k),
                                             bg=_dihedral_np(np.array(s.bg), k)))

            probs, feats = self.net(x, taps=taps)
            embeddings = {tap: self.heads[tap](feats[tap]) for tap in taps}

            batch_terms = []
            for slot, (i, k) in enumerate(zip(idxs, codes)):
                terms = {"scribble": losses.scribble_loss(probs[slot], scribbles[slot])}
                total = terms["scribble"]
                if is_main:
                    pseudo_aug = _dihedral_np(np.array(self.pseudo[i].labels), k)
                    terms["pseudo"] = losses.pseudo_loss(probs[slot], pseudo_aug)
                    total = total + cfg.loss.pseudo_weight * terms["pseudo"]
                    for si, scale in enumerate(cfg.loss.scales):
                        key = f"contrast{si + 1}_x{scale.factor}"
                        if k == 0 and self.pooled[i] is not None:
                            pooled = self.pooled[i][scale.factor]
                        else:
                            pooled = downscale_labels(pseudo_aug, scribbles[slot],
                                                      scale.factor, cfg.loss.bg_thresh,
                                                      cfg.loss.fg_thresh)
                        try:
                            sample = losses.sample_pixels(
                                pooled, effective_cap,
                                seed=self._sample_seed(epoch, step, slot * 8 + si))
                            term = losses.contrastive_loss(
                                embeddings[scale.tap][slot], pooled,
                                scale.temperature, cfg.loss.pair_op, sample)
                        except ValueError:
                            # degenerate pair set at this scale: skip, not fatal
                            skipped += 1
                            term = torch.zeros((), dtype=probs.dtype, device=self.device)
                        terms[key] = term
                        total = total + scale.weight * term
                terms["total"] = total
                batch_terms.append(terms)

            batch_loss = torch.stack([t["total"] for t in batch_terms]).mean()
            if not torch.isfinite(batch_loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} step {step}")
            self.optimizer.zero_grad()
            batch_loss.backward()
            self.optimizer.step()

            for slot, (i, k) in enumerate(zip(idxs, codes)):
                canonical_probs[i] = _dihedral_np(
                    probs[slot].detach().cpu().numpy().astype(np.float64), k,
                    inverse=True)
                for key, term in batch_terms[slot].items():
                    sums[key] += term.detach().item() if torch.is_tensor(term) else float(term)

        for i in range(n):
            self.trackers[i].update(canonical_probs[i])

        record = {"epoch": epoch, "stage": stage,
                  "pseudo_count": sum(p.count for p in self.pseudo if p is not None),
                  "skipped_terms": skipped, "wall_time": time.perf_counter() - t0}
        for key in self.runlog.loss_keys:
            record[key] = sums[key] / n if key in sums else None
        if self.val_items:
            _, agg = evaluate(self.net, self.val_items, cfg.eval_threshold,
                              cfg.batch_size, cfg.device)
            record["val_iou"], record["val_mdice"] = agg.iou, agg.mdice
        else:
            record["val_iou"] = record["val_mdice"] = None
        self.runlog.append(record)
        self.epoch = epoch
        return record

    def run_warmup(self) -> RunLog:
        """Scribble-only stage; emits the initial pseudo-labels at the end."""
        while self.epoch < self.cfg.warmup_epochs:
            self._epoch_pass("warmup")
        if not self.warmup_emitted:
            self._refresh_pseudo(0)
            self.warmup_emitted = True
        return self.runlog

    def run_main(self, max_epochs: int | None = None) -> RunLog:
        """Full-objective stage; refreshes pseudo-labels every refresh_period.

        `max_epochs` bounds how many further main epochs run, so training
        can be interrupted at an epoch boundary and resumed later.
        """
        if not self.warmup_emitted:
            raise RuntimeError("warm-up artifacts missing; run warm-up first")
        total = self.cfg.warmup_epochs + self.cfg.main_epochs
        if max_epochs is not None:
            total = min(total, self.epoch + max_epochs)
        while self.epoch < total:
            main_index = self.epoch - self.cfg.warmup_epochs
            if main_index % self.cfg.refresh_period == 0 and main_index > 0:
                self._refresh_pseudo(main_index)
            self._epoch_pass("main")
        return self.runlog

    def train(self) -> RunLog:
        self.run_warmup()
        return self.run_main()

    # ------------------------------------------------------------- evaluate

    def evaluate(self, items: list[DatasetItem] | None = None):
        items = items if items is not None else (self.val_items or self.train_items)
        return evaluate(self.net, items, self.cfg.eval_threshold,
                        self.cfg.batch_size, self.cfg.device)

    # ---------------------------------------------------------- persistence

    def save(self, path, manifest_hash: str | None = None) -> Path:
        extra = {
            "train_config": config_to_dict(self.cfg),
            "epoch": self.epoch,
            "warmup_emitted": self.warmup_emitted,
            "refresh_events": list(self.refresh_events),
            "optimizer_state": self.optimizer.state_dict(),
            "heads_state": {tap: h.state_dict() for tap, h in self.heads.items()},
            "trackers": [t.state() for t in self.trackers],
            "pseudo_labels": [None if p is None else np.array(p.labels)
                              for p in self.pseudo],
            "runlog": {"loss_keys": list(self.runlog.loss_keys),
                       "records": list(self.runlog.records)},
            "manifest_hash": manifest_hash,
        }
        return save_checkpoint(path, self.net, extra=extra)

    @classmethod
    def resume(cls, path, train_items: list[DatasetItem],
               val_items: list[DatasetItem] | None = None) -> "Trainer":
        """Rebuild a trainer mid-run; continuing reproduces the uninterrupted
        run record-for-record (wall time aside) on a deterministic backend."""
        payload = load_checkpoint(path)
        extra = payload["extra"]
        if "train_config" not in extra:
            raise ValueError("checkpoint has no trainer state")
        cfg = config_from_dict(extra["train_config"])
        if len(extra["trackers"]) != len(train_items):
            raise ValueError(
                f"checkpoint was trained on {len(extra['trackers'])} items, "
                f"got {len(train_items)}")
        trainer = cls(cfg, train_items, val_items)
        trainer.net = network_from_checkpoint(payload).to(trainer.device)
        params = list(trainer.net.parameters())
        for tap, head in trainer.heads.items():
            head.load_state_dict(extra["heads_state"][tap])
            params += list(head.parameters())
        trainer.optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
        trainer.optimizer.load_state_dict(extra["optimizer_state"])
        trainer.trackers = [EmaTracker.from_state(s) for s in extra["trackers"]]
        trainer.epoch = int(extra["epoch"])
        trainer.warmup_emitted = bool(extra["warmup_emitted"])
        trainer.refresh_events = list(extra["refresh_events"])
        trainer.runlog = RunLog(loss_keys=tuple(extra["runlog"]["loss_keys"]),
                                records=list(extra["runlog"]["records"]))
        for i, labels in enumerate(extra["pseudo_labels"]):
            if labels is None:
                continue
            trainer.pseudo[i] = PseudoLabelMap(labels)
            trainer.pooled[i] = {
                scale.factor: downscale_labels(trainer.pseudo[i],
                                               train_items[i].scribbles,
                                               scale.factor, cfg.loss.bg_thresh,
                                               cfg.loss.fg_thresh)
                for scale in cfg.loss.scales
            }
        return trainer

    def run_summary(self, manifest_hash: str | None = None) -> dict:
        last = self.runlog.records[-1] if self.runlog.records else {}
        return {
            "config": config_to_dict(self.cfg),
            "manifest_hash": manifest_hash,
            "epochs_completed": self.epoch,
            "refresh_events": list(self.refresh_events),
            "final_val_iou": last.get("val_iou"),
            "final_val_mdice": last.get("val_mdice"),
            "final_total_loss": last.get("total"),
        }
