"""Segmentation quality measures: semantic IoU and per-instance mean Dice,
plus 4-connected instance extraction and CSV reporting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "InstanceMap",
    "iou",
    "extract_instances",
    "mdice",
    "binarize",
    "MetricRow",
    "score_image",
    "write_metrics_csv",
]

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel instance ids: 0 is background, instances are 1..count."""

    ids: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.int32)
        arr.setflags(write=False)
        object.__setattr__(self, "ids", arr)

    @property
    def count(self) -> int:
        return int(self.ids.max(initial=0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def mask(self) -> np.ndarray:
        return self.ids > 0

    def validate(self) -> list[str]:
        out = []
        if self.ids.ndim != 2:
            out.append("ids must be 2-D")
            return out
        if self.ids.min(initial=0) < 0:
            out.append("negative instance id")
        present = np.unique(self.ids[self.ids > 0])
        if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
            out.append("instance ids not contiguous from 1")
        for k in present:
            _, n = ndimage.label(self.ids == k, structure=FOUR_CONNECTED)
            if n != 1:
                out.append(f"instance {int(k)} not 4-connected")
        return out


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty.

    Worked example: two 2x2 blocks overlapping in a 2x1 strip share 2 of
    their 6 combined pixels.

    >>> a = np.zeros((3, 4), dtype=bool); a[0:2, 0:2] = True
    >>> b = np.zeros((3, 4), dtype=bool); b[0:2, 1:3] = True
    >>> iou(a, b) == 2 / 6
    True
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def extract_instances(mask: np.ndarray) -> InstanceMap:
    """Label 4-connected components 1..K in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    raw, k = ndimage.label(mask, structure=FOUR_CONNECTED)
    if k == 0:
        return InstanceMap(raw)
    # relabel by first occurrence in the raster scan
    flat = raw.ravel()
    nz = np.flatnonzero(flat)
    first_idx = np.full(k + 1, flat.size, dtype=np.int64)
    np.minimum.at(first_idx, flat[nz], nz)
    order = np.argsort(first_idx[1:], kind="stable") + 1
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[order] = np.arange(1, k + 1, dtype=np.int32)
    return InstanceMap(remap[raw])


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground mask from a probability map at a fixed threshold."""
    return np.asarray(getattr(probs, "probs", probs)) >= threshold


def mdice(pred: InstanceMap, gt: InstanceMap) -> float:
    """Mean over GT instances of the best Dice any predicted instance achieves.

    One predicted instance may be the best match of several GT instances;
    a GT instance with no overlapping prediction scores 0.

    Worked example: a 2-px prediction inside a 4-px instance scores
    2*2 / (2+4).

    >>> gt = InstanceMap(np.array([[1, 1], [1, 1]]))
    >>> pred = InstanceMap(np.array([[1, 1], [0, 0]]))
    >>> mdice(pred, gt) == 4 / 6
    True

    Raises:
        ValueError: when the GT map has no instances.
    """
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    n_gt = gt.count
    if n_gt == 0:
        raise ValueError("no ground-truth instances")
    n_pred = pred.count
    gt_sizes = np.bincount(gt.ids.ravel(), minlength=n_gt + 1)
    if n_pred == 0:
        return 0.0
    pred_sizes = np.bincount(pred.ids.ravel(), minlength=n_pred + 1)
    # joint histogram of (gt id, pred id) over overlapping foreground pixels
    sel = (gt.ids > 0) & (pred.ids > 0)
    joint = np.bincount(
        gt.ids[sel].astype(np.int64) * (n_pred + 1) + pred.ids[sel].astype(np.int64),
        minlength=(n_gt + 1) * (n_pred + 1),
    ).reshape(n_gt + 1, n_pred + 1)
    scores = []
    for g in range(1, n_gt + 1):
        inter = joint[g, 1:]
        denom = pred_sizes[1:] + gt_sizes[g]
        scores.append((2.0 * inter / denom).max(initial=0.0))
    return float(np.mean(scores))


@dataclass(frozen=True)
class MetricRow:
    image_id: str
    iou: float
    mdice: float
    n_gt_instances: int
    n_pred_instances: int


def score_image(image_id: str, pred_probs, gt: InstanceMap,
                threshold: float = 0.5) -> MetricRow:
    """IoU + mDice of one predicted probability map against GT instances."""
    pred_mask = binarize(pred_probs, threshold)
    pred_inst = extract_instances(pred_mask)
    return MetricRow(
        image_id=image_id,
        iou=iou(pred_mask, gt.mask()),
        mdice=mdice(pred_inst, gt),
        n_gt_instances=gt.count,
        n_pred_instances=pred_inst.count,
    )


def aggregate_rows(rows: list[MetricRow]) -> MetricRow:
    return MetricRow(
        image_id="aggregate",
        iou=float(np.mean([r.iou for r in rows])) if rows else 0.0,
        mdice=float(np.mean([r.mdice for r in rows])) if rows else 0.0,
        n_gt_instances=sum(r.n_gt_instances for r in rows),
        n_pred_instances=sum(r.n_pred_instances for r in rows),
    )


def write_metrics_csv(rows: list[MetricRow], path) -> MetricRow:
    """Write per-image rows plus one aggregate row; returns the aggregate."""
    agg = aggregate_rows(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "iou", "mdice", "n_gt_instances", "n_pred_instances"])
        for r in list(rows) + [agg]:
            writer.writerow([r.image_id, f"{r.iou:.6f}", f"{r.mdice:.6f}",
                             r.n_gt_instances, r.n_pred_instances])
    return agg
