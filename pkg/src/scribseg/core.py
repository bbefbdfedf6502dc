"""Dense-grid domain types shared across the toolkit.

All types are immutable after construction (arrays are marked read-only),
so they can be shared freely between threads. Construction never raises on
invariant violations; call ``validate`` to get a report instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "Label",
    "ImageGrid",
    "PredictionGrid",
    "ScribbleMap",
    "PseudoLabelMap",
    "DownscaledLabelMap",
    "FeatureTap",
    "EmbeddingGrid",
    "ScaleSpec",
    "LossConfig",
    "PAIR_OPS",
    "is_power_of_two",
    "validate",
]


class Label(IntEnum):
    """Tri-state pixel label. IGNORE doubles as "unlabeled" for scribbles."""

    IGNORE = -1
    BG = 0
    FG = 1


PAIR_OPS = ("or", "and", "xnor")


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _frozen_array(obj, name, value, dtype) -> None:
    arr = np.asarray(value, dtype=dtype)
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class ImageGrid:
    """Input raster with values normalized to [0, 1], shaped (channels, H, W)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        _frozen_array(self, "pixels", px, np.float32)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def validate(self) -> list[str]:
        out = []
        if self.pixels.ndim != 3:
            out.append("pixels must be (channels, H, W)")
            return out
        if self.height < 1 or self.width < 1:
            out.append("empty grid")
        if not np.all(np.isfinite(self.pixels)):
            out.append("non-finite pixel values")
        elif self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            out.append("pixel values outside [0, 1]")
        return out


@dataclass(frozen=True)
class PredictionGrid:
    """Per-pixel foreground probability map, shaped (H, W)."""

    probs: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "probs", self.probs, np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def validate(self) -> list[str]:
        out = []
        if self.probs.ndim != 2:
            out.append("probs must be 2-D")
            return out
        if not np.all(np.isfinite(self.probs)):
            out.append("non-finite probabilities")
        elif self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            out.append("probabilities outside [0, 1]")
        return out


@dataclass(frozen=True)
class ScribbleMap:
    """Sparse stroke annotation: boolean foreground / background stroke masks.

    The labeled set is the union of the two masks; a well-formed map keeps
    them disjoint.
    """

    fg: np.ndarray
    bg: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "fg", self.fg, bool)
        _frozen_array(self, "bg", self.bg, bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.fg.shape

    @property
    def labeled(self) -> np.ndarray:
        return self.fg | self.bg

    @property
    def count(self) -> int:
        return int(self.labeled.sum())

    def labels(self) -> np.ndarray:
        """Tri-state view: FG on fg strokes, BG on bg strokes, IGNORE elsewhere."""
        out = np.full(self.fg.shape, Label.IGNORE, dtype=np.int8)
        out[self.bg] = Label.BG
        out[self.fg] = Label.FG
        return out

    def validate(self) -> list[str]:
        out = []
        if self.fg.shape != self.bg.shape:
            out.append("fg/bg shape mismatch")
            return out
        if np.any(self.fg & self.bg):
            out.append("disjointness")
        if not np.any(self.fg | self.bg):
            out.append("no scribbled pixels")
        return out


@dataclass(frozen=True)
class PseudoLabelMap:
    """Tri-state pseudo-labels; the confident set is every non-IGNORE pixel."""

    labels: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "labels", self.labels, np.int8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def confident(self) -> np.ndarray:
        return self.labels != Label.IGNORE

    @property
    def count(self) -> int:
        return int(self.confident.sum())

    def validate(self) -> list[str]:
        out = []
        if self.labels.ndim != 2:
            out.append("labels must be 2-D")
            return out
        if not np.isin(self.labels, (Label.IGNORE, Label.BG, Label.FG)).all():
            out.append("labels outside {bg, fg, ignore}")
        return out


@dataclass(frozen=True)
class DownscaledLabelMap:
    """Block-pooled tri-state label grid at a power-of-two scale factor."""

    labels: np.ndarray
    factor: int
    bg_thresh: float = 0.0
    fg_thresh: float = 1.0

    def __post_init__(self):
        _frozen_array(self, "labels", self.labels, np.int8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def validate(self) -> list[str]:
        out = []
        if not is_power_of_two(self.factor):
            out.append("scale not a power of two")
        if not (0.0 <= self.bg_thresh <= 1.0 and 0.0 <= self.fg_thresh <= 1.0):
            out.append("thresholds outside [0, 1]")
        if self.bg_thresh > self.fg_thresh:
            out.append("bg threshold above fg threshold")
        if not np.isin(self.labels, (Label.IGNORE, Label.BG, Label.FG)).all():
            out.append("labels outside {bg, fg, ignore}")
        return out


@dataclass(frozen=True)
class FeatureTap:
    """Decoder feature map (C, h, w) taken at stage ordinal ``tap``."""

    features: np.ndarray
    tap: int

    def __post_init__(self):
        _frozen_array(self, "features", self.features, np.float32)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[1:]

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def validate(self) -> list[str]:
        out = []
        if self.features.ndim != 3:
            out.append("features must be (C, h, w)")
            return out
        if self.tap < 1:
            out.append("tap ordinal must be positive")
        if not np.all(np.isfinite(self.features)):
            out.append("non-finite features")
        return out


@dataclass(frozen=True)
class EmbeddingGrid:
    """Projected per-cell embeddings (C', h, w); cells must be L2-normalizable."""

    embeddings: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "embeddings", self.embeddings, np.float32)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.embeddings.shape[1:]

    @property
    def channels(self) -> int:
        return self.embeddings.shape[0]

    def validate(self) -> list[str]:
        out = []
        if self.embeddings.ndim != 3:
            out.append("embeddings must be (C', h, w)")
            return out
        if not np.all(np.isfinite(self.embeddings)):
            out.append("non-finite embeddings")
            return out
        norms = np.linalg.norm(self.embeddings.reshape(self.channels, -1), axis=0)
        if self.embeddings.size and norms.min() == 0.0:
            out.append("zero embedding")
        return out


@dataclass(frozen=True)
class ScaleSpec:
    """One contrastive regularizer arm: which decoder tap feeds it, the label
    downscale factor, the similarity temperature, and the loss weight."""

    tap: int
    factor: int
    temperature: float
    weight: float

    def validate(self) -> list[str]:
        out = []
        if self.tap < 1:
            out.append("tap ordinal must be positive")
        if not is_power_of_two(self.factor):
            out.append("scale not a power of two")
        if self.temperature <= 0.0:
            out.append("temperature must be positive")
        if self.weight < 0.0:
            out.append("negative weight")
        return out


# Default wiring for the 5-stage decoder: the full-resolution regularizer reads
# the last decoder stage, the quarter-resolution one reads the third stage.
FULL_RES_TAP = 5
QUARTER_RES_TAP = 3


@dataclass(frozen=True)
class LossConfig:
    """Weights, temperatures and sampling knobs for the total training loss."""

    pseudo_weight: float = 0.5
    scales: tuple[ScaleSpec, ...] = (
        ScaleSpec(tap=FULL_RES_TAP, factor=1, temperature=0.3, weight=0.5),
        ScaleSpec(tap=QUARTER_RES_TAP, factor=4, temperature=0.1, weight=10.0),
    )
    bg_thresh: float = 0.0
    fg_thresh: float = 1.0
    sample_cap: int = 6000
    pair_op: str = "or"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))

    def validate(self) -> list[str]:
        out = []
        if self.pseudo_weight < 0.0:
            out.append("negative weight")
        if self.bg_thresh > self.fg_thresh:
            out.append("bg threshold above fg threshold")
        if self.sample_cap < 1:
            out.append("sample cap must be at least 1")
        if self.pair_op not in PAIR_OPS:
            out.append(f"unknown pair op {self.pair_op!r}")
        for spec in self.scales:
            out.extend(spec.validate())
        return out


def validate(obj) -> list[str]:
    """Report invariant violations for any core type; empty list means valid."""
    return obj.validate()
