"""Pseudo-label machinery: per-image EMA prediction tracking, confidence
filtering into tri-state pseudo-labels, and block-pooled downscaling with
scribble override."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DownscaledLabelMap,
    Label,
    PseudoLabelMap,
    ScribbleMap,
    is_power_of_two,
)

__all__ = [
    "EmaTracker",
    "FilterConfig",
    "ema_update",
    "filter_pseudo",
    "downscale_labels",
    "labels_to_raster",
    "raster_to_labels",
]

# 8-bit raster encoding for tri-state label maps.
RASTER_BG, RASTER_IGNORE, RASTER_FG = 0, 128, 255


@dataclass(frozen=True)
class FilterConfig:
    """Knobs of the pseudo-label filter.

    momentum: weight kept on the running average at each update.
    confidence: a pixel becomes fg when its EMA is >= confidence, bg when
        <= 1 - confidence, ignore in between.
    refresh_period: epochs between pseudo-label regenerations in the main
        training stage.
    """

    momentum: float = 0.2
    confidence: float = 0.8
    refresh_period: int = 5

    def validate(self) -> list[str]:
        out = []
        if not 0.0 <= self.momentum <= 1.0:
            out.append("momentum outside [0, 1]")
        if not 0.5 < self.confidence <= 1.0:
            out.append("confidence outside (0.5, 1]")
        if self.refresh_period < 1:
            out.append("refresh period must be at least 1")
        return out


@dataclass
class EmaTracker:
    """Running average of the predictions for one training image.

    Mutable, single-writer state owned by the trainer. The first update
    stores the prediction verbatim; later ones blend with ``momentum`` kept
    on the old average.
    """

    momentum: float = 0.2
    ema: np.ndarray | None = None
    update_count: int = 0

    def update(self, pred) -> "EmaTracker":
        probs = np.asarray(getattr(pred, "probs", pred), dtype=np.float64)
        if self.ema is None:
            self.ema = probs.copy()
        else:
            if probs.shape != self.ema.shape:
                raise ValueError(
                    f"prediction shape {probs.shape} does not match tracker {self.ema.shape}")
            self.ema = self.momentum * self.ema + (1.0 - self.momentum) * probs
        self.update_count += 1
        return self

    def state(self) -> dict:
        return {"momentum": self.momentum,
                "ema": None if self.ema is None else self.ema.copy(),
                "update_count": self.update_count}

    @classmethod
    def from_state(cls, state: dict) -> "EmaTracker":
        ema = state["ema"]
        return cls(momentum=float(state["momentum"]),
                   ema=None if ema is None else np.asarray(ema, dtype=np.float64),
                   update_count=int(state["update_count"]))


def ema_update(tracker: EmaTracker, pred) -> EmaTracker:
    """Fold one prediction grid into the tracker (in place); returns it."""
    return tracker.update(pred)


def filter_pseudo(tracker: EmaTracker, scribbles: ScribbleMap | None,
                  confidence: float = 0.8) -> PseudoLabelMap:
    """Threshold the EMA into tri-state pseudo-labels.

    A pixel is fg when ema >= confidence, bg when ema <= 1 - confidence,
    ignore otherwise. Scribbled pixels always carry their stroke label.

    Raises:
        ValueError: if the tracker was never updated or confidence is
            outside (0.5, 1].
    """
    if tracker.update_count < 1 or tracker.ema is None:
        raise ValueError("tracker has no updates")
    if not 0.5 < confidence <= 1.0:
        raise ValueError("confidence must lie in (0.5, 1]")
    labels = np.full(tracker.ema.shape, Label.IGNORE, dtype=np.int8)
    labels[tracker.ema >= confidence] = Label.FG
    labels[tracker.ema <= 1.0 - confidence] = Label.BG
    if scribbles is not None:
        labels[scribbles.bg] = Label.BG
        labels[scribbles.fg] = Label.FG
    return PseudoLabelMap(labels)


def downscale_labels(pseudo: PseudoLabelMap, scribbles: ScribbleMap | None,
                     factor: int, bg_thresh: float = 0.0,
                     fg_thresh: float = 1.0) -> DownscaledLabelMap:
    """Pool tri-state labels into blocks of ``factor`` x ``factor``.

    Per block: a foreground stroke forces fg, a background stroke forces bg,
    both together force ignore. Without strokes, the mean of the non-ignore
    labels decides: <= bg_thresh gives bg, >= fg_thresh gives fg (bg checked
    first), anything else, or an all-ignore block, stays ignore. Blocks at
    the bottom/right boundary may be smaller; missing pixels simply do not
    contribute.
    """
    if not is_power_of_two(factor):
        raise ValueError("scale factor must be a power of two")
    if bg_thresh > fg_thresh:
        raise ValueError("bg threshold must not exceed fg threshold")
    lab = np.asarray(getattr(pseudo, "labels", pseudo), dtype=np.int8)
    h, w = lab.shape
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    ph, pw = oh * factor, ow * factor

    def pad(a, fill):
        if a.shape == (ph, pw):
            return a
        out = np.full((ph, pw), fill, dtype=a.dtype)
        out[:h, :w] = a
        return out

    blocks = pad(lab, Label.IGNORE).reshape(oh, factor, ow, factor)
    known = blocks != Label.IGNORE
    counts = known.sum(axis=(1, 3))
    sums = np.where(known, blocks, 0).sum(axis=(1, 3), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    out = np.full((oh, ow), Label.IGNORE, dtype=np.int8)
    pooled_bg = (counts > 0) & (mean <= bg_thresh)
    pooled_fg = (counts > 0) & (mean >= fg_thresh) & ~pooled_bg
    out[pooled_bg] = Label.BG
    out[pooled_fg] = Label.FG

    if scribbles is not None:
        has_fg = pad(np.asarray(scribbles.fg, bool), False) \
            .reshape(oh, factor, ow, factor).any(axis=(1, 3))
        has_bg = pad(np.asarray(scribbles.bg, bool), False) \
            .reshape(oh, factor, ow, factor).any(axis=(1, 3))
        out[has_bg] = Label.BG
        out[has_fg] = Label.FG
        out[has_fg & has_bg] = Label.IGNORE

    return DownscaledLabelMap(out, factor=factor, bg_thresh=bg_thresh, fg_thresh=fg_thresh)


def labels_to_raster(labels) -> np.ndarray:
    """Encode a tri-state label grid as uint8: bg 0, ignore 128, fg 255."""
    lab = np.asarray(getattr(labels, "labels", labels))
    out = np.full(lab.shape, RASTER_IGNORE, dtype=np.uint8)
    out[lab == Label.BG] = RASTER_BG
    out[lab == Label.FG] = RASTER_FG
    return out


def raster_to_labels(raster: np.ndarray) -> np.ndarray:
    """Decode the 8-bit encoding back into a tri-state int8 grid."""
    raster = np.asarray(raster)
    known = np.isin(raster, (RASTER_BG, RASTER_IGNORE, RASTER_FG))
    if not known.all():
        bad = sorted(set(np.unique(raster[~known]).tolist()))
        raise ValueError(f"unexpected raster values {bad}")
    out = np.full(raster.shape, Label.IGNORE, dtype=np.int8)
    out[raster == RASTER_BG] = Label.BG
    out[raster == RASTER_FG] = Label.FG
    return out
