"""Stateless loss kernels.

Scribble / pseudo-label binary cross-entropy, their weighted combination,
and pair-contrastive regularization over temperature-scaled cosine
similarities of per-cell embeddings. All functions are pure and operate on
torch tensors so gradients flow to predictions and embeddings; numpy arrays
and the core grid types are accepted and converted. Input dtype is
preserved, so float64 fixtures yield float64 results for tight oracle
comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import (
    PAIR_OPS,
    DownscaledLabelMap,
    Label,
    LossConfig,
)

__all__ = [
    "EPS",
    "scribble_loss",
    "pseudo_loss",
    "supervision_loss",
    "pair_label",
    "sample_pixels",
    "contrastive_loss",
    "total_loss",
    "PairBatch",
    "pair_batch_loss",
]

# Probabilities are clamped to [EPS, 1-EPS] before every log.
EPS = 1e-7


def _as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.array(x))


def _prob_tensor(pred) -> torch.Tensor:
    return _as_tensor(getattr(pred, "probs", pred))


def _label_array(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels))


def _embedding_tensor(embeddings) -> torch.Tensor:
    return _as_tensor(getattr(embeddings, "embeddings", embeddings))


def _bce(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(EPS, 1.0 - EPS)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log())


def scribble_loss(pred, scribbles) -> torch.Tensor:
    """Mean BCE against stroke labels over the scribbled pixel set.

    Args:
        pred: PredictionGrid, array or tensor of foreground probabilities (H, W).
        scribbles: ScribbleMap (or any object with boolean ``fg``/``bg`` masks).

    Raises:
        ValueError: if no pixel is scribbled.
    """
    probs = _prob_tensor(pred)
    fg = np.asarray(scribbles.fg)
    bg = np.asarray(scribbles.bg)
    labeled = fg | bg
    if not labeled.any():
        raise ValueError("no scribbled pixels")
    sel = torch.as_tensor(labeled, device=probs.device)
    target = torch.as_tensor(fg[labeled], device=probs.device).to(probs.dtype)
    return _bce(target, probs[sel]).mean()


def pseudo_loss(pred, pseudo) -> torch.Tensor:
    """Mean BCE against pseudo-labels over the confident set; 0 if empty."""
    probs = _prob_tensor(pred)
    labels = _label_array(pseudo)
    confident = labels != Label.IGNORE
    if not confident.any():
        return torch.zeros((), dtype=probs.dtype)
    sel = torch.as_tensor(confident, device=probs.device)
    target = torch.as_tensor(
        labels[confident].astype(np.float64), device=probs.device).to(probs.dtype)
    return _bce(target, probs[sel]).mean()


def supervision_loss(pred, scribbles, pseudo, pseudo_weight: float = 0.5) -> torch.Tensor:
    """Scribble loss plus ``pseudo_weight`` times the pseudo-label loss."""
    return scribble_loss(pred, scribbles) + pseudo_weight * pseudo_loss(pred, pseudo)


def pair_label(a: int, b: int, op: str = "or") -> int:
    """Binary pair target for two cell labels: a|b, a&b, or equality (xnor)."""
    if a not in (0, 1) or b not in (0, 1):
        raise ValueError("pair labels must be 0 or 1")
    if op == "or":
        return a | b
    if op == "and":
        return a & b
    if op == "xnor":
        return 1 - abs(a - b)
    raise ValueError(f"unknown pair op {op!r}")


def _pair_targets(labels: torch.Tensor, op: str) -> torch.Tensor:
    a = labels.unsqueeze(1)
    b = labels.unsqueeze(0)
    if op == "or":
        return (a | b).to(torch.float64)
    if op == "and":
        return (a & b).to(torch.float64)
    if op == "xnor":
        return 1.0 - (a - b).abs().to(torch.float64)
    raise ValueError(f"unknown pair op {op!r}")


def sample_pixels(labels, cap: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to ``cap`` flat cell indices per class, without replacement.

    Ignore-labeled cells are never candidates. Deterministic for a fixed
    seed; indices are returned sorted.

    Returns:
        (fg_indices, bg_indices) as int64 arrays of flat indices.

    Raises:
        ValueError: if cap < 1 or both classes are empty.
    """
    if cap < 1:
        raise ValueError("sample cap must be at least 1")
    lab = _label_array(labels).ravel()
    fg_pool = np.flatnonzero(lab == Label.FG)
    bg_pool = np.flatnonzero(lab == Label.BG)
    if fg_pool.size == 0 and bg_pool.size == 0:
        raise ValueError("no confident pixels at this scale")
    rng = np.random.default_rng(seed)

    def pick(pool: np.ndarray) -> np.ndarray:
        if pool.size <= cap:
            return pool.astype(np.int64)
        return np.sort(rng.choice(pool, size=cap, replace=False)).astype(np.int64)

    return pick(fg_pool), pick(bg_pool)


def _selected_cells(labels: np.ndarray, sample) -> np.ndarray:
    if sample is None:
        return np.flatnonzero(labels.ravel() != Label.IGNORE)
    if isinstance(sample, (tuple, list)):
        parts = [np.asarray(s, dtype=np.int64) for s in sample]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return np.asarray(sample, dtype=np.int64)


def contrastive_loss(embeddings, labels, temperature: float, op: str = "or",
                     sample=None) -> torch.Tensor:
    """Pair BCE between label agreement and sigmoid-scaled cosine similarity.

    Every ordered pair (i, j), i != j, of the selected cells contributes
    BCE(pair_label(y_i, y_j), sigmoid(cos(z_i, z_j) / temperature)) where the
    z are L2-normalized per cell; the result is the mean over evaluated
    pairs. Without ``sample`` every non-ignore cell participates; with it,
    only the given per-class index lists do.

    Args:
        embeddings: EmbeddingGrid, array or tensor shaped (C, h, w).
        labels: DownscaledLabelMap or tri-state array shaped (h, w).
        temperature: positive similarity divisor.
        op: pair target operator, one of "or" / "and" / "xnor".
        sample: optional per-class flat index lists (as from sample_pixels).

    Raises:
        ValueError: on shape mismatch, non-positive temperature, fewer than
            two selected cells, an ignore-labeled sampled cell, or a zero
            embedding among the selected cells.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if op not in PAIR_OPS:
        raise ValueError(f"unknown pair op {op!r}")
    z = _embedding_tensor(embeddings)
    lab = _label_array(labels)
    if z.shape[1:] != lab.shape:
        raise ValueError("label grid and embedding grid shape mismatch")
    cells = _selected_cells(lab, sample)
    if cells.size < 2:
        raise ValueError("degenerate pair set")
    flat_lab = lab.reshape(-1)[cells]
    if (flat_lab == Label.IGNORE).any():
        raise ValueError("ignore-labeled cell in sample")

    zsel = z.reshape(z.shape[0], -1)[:, torch.as_tensor(cells, device=z.device)]
    zsel = zsel.transpose(0, 1)
    norms = zsel.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero embedding among selected cells")
    zn = zsel / norms
    cos = zn @ zn.transpose(0, 1)
    prob = torch.sigmoid(cos / temperature)
    target = _pair_targets(
        torch.as_tensor(flat_lab.astype(np.int64), device=z.device), op).to(prob.dtype)
    bce = _bce(target, prob)
    n = cells.size
    return (bce.sum() - bce.diagonal().sum()) / (n * (n - 1))


def total_loss(pred, scribbles, pseudo, embeddings: Sequence, pooled: Sequence,
               cfg: LossConfig, sample_seed: int | None = None):
    """Supervision loss plus the weighted contrastive term of every scale.

    Args:
        embeddings: one embedding grid per configured scale.
        pooled: the matching downscaled label maps.
        cfg: loss weights/temperatures; ``cfg.sample_cap`` applies only when
            ``sample_seed`` is given, otherwise pairs are enumerated
            exhaustively.

    Returns:
        (total, breakdown) where breakdown maps term names ("scribble",
        "pseudo", "contrast1_x1", ..., "total") to scalar tensors.
    """
    if len(embeddings) != len(cfg.scales) or len(pooled) != len(cfg.scales):
        raise ValueError("embeddings/pooled/scales length mismatch")
    loss_s = scribble_loss(pred, scribbles)
    loss_p = pseudo_loss(pred, pseudo)
    total = loss_s + cfg.pseudo_weight * loss_p
    breakdown = {"scribble": loss_s, "pseudo": loss_p}
    for k, (scale, emb, lab) in enumerate(zip(cfg.scales, embeddings, pooled)):
        if isinstance(lab, DownscaledLabelMap) and lab.factor != scale.factor:
            raise ValueError(
                f"scale {k}: pooled labels built at factor {lab.factor}, "
                f"config says {scale.factor}")
        sample = None
        if sample_seed is not None:
            sample = sample_pixels(lab, cfg.sample_cap, seed=sample_seed + k)
        term = contrastive_loss(emb, lab, scale.temperature, cfg.pair_op, sample)
        breakdown[f"contrast{k + 1}_x{scale.factor}"] = term
        total = total + scale.weight * term
    breakdown["total"] = total
    return total, breakdown


@dataclass(frozen=True)
class PairBatch:
    """Materialized ordered cell pairs for one contrastive evaluation."""

    indices_a: np.ndarray
    indices_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    embeddings_a: np.ndarray
    embeddings_b: np.ndarray

    @property
    def pair_count(self) -> int:
        return len(self.indices_a)

    def validate(self) -> list[str]:
        out = []
        n = {len(self.indices_a), len(self.indices_b), len(self.labels_a),
             len(self.labels_b), len(self.embeddings_a), len(self.embeddings_b)}
        if len(n) != 1:
            out.append("pair list length mismatch")
            return out
        if not (np.isin(self.labels_a, (0, 1)).all()
                and np.isin(self.labels_b, (0, 1)).all()):
            out.append("pair labels outside {0, 1}")
        return out

    @classmethod
    def from_cells(cls, embeddings, labels, cells=None) -> "PairBatch":
        """Enumerate all ordered pairs i != j over the selected cells."""
        z = _embedding_tensor(embeddings).detach().cpu().numpy()
        lab = _label_array(labels)
        idx = _selected_cells(lab, cells)
        if idx.size < 2:
            raise ValueError("degenerate pair set")
        flat_z = z.reshape(z.shape[0], -1).T
        flat_lab = lab.reshape(-1)
        ia, ib = np.meshgrid(idx, idx, indexing="ij")
        keep = ia.ravel() != ib.ravel()
        ia, ib = ia.ravel()[keep], ib.ravel()[keep]
        return cls(ia, ib, flat_lab[ia].astype(np.int64), flat_lab[ib].astype(np.int64),
                   flat_z[ia], flat_z[ib])


def pair_batch_loss(batch: PairBatch, temperature: float, op: str = "or") -> float:
    """Mean pair BCE over a materialized PairBatch (non-differentiable path)."""
    za = torch.as_tensor(batch.embeddings_a)
    zb = torch.as_tensor(batch.embeddings_b)
    cos = torch.nn.functional.cosine_similarity(za, zb, dim=1, eps=0.0)
    prob = torch.sigmoid(cos / temperature)
    ta = torch.as_tensor(batch.labels_a)
    tb = torch.as_tensor(batch.labels_b)
    target = torch.as_tensor(
        [pair_label(int(a), int(b), op) for a, b in zip(ta, tb)]).to(prob.dtype)
    return float(_bce(target, prob).mean())
