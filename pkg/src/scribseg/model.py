"""Encoder-decoder segmentation network with numbered decoder stages that can
be tapped for intermediate features, projection heads for embedding those
features, and a versioned checkpoint container."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import EmbeddingGrid, FeatureTap, ImageGrid, PredictionGrid

__all__ = [
    "NetworkConfig",
    "ProjectionHeadConfig",
    "SegmentationNet",
    "ProjectionHead",
    "forward_with_taps",
    "project",
    "stage_for_factor",
    "factor_for_stage",
    "tap_channels",
    "save_checkpoint",
    "load_checkpoint",
    "network_from_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SSEG1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the symmetric encoder-decoder.

    With n = len(stage_widths) encoder levels the decoder has n+1 numbered
    stages: stage 1 is the bottleneck (coarsest), stage n+1 the full-res
    output features. Input sides must divide by 2**n.
    """

    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 1
    convs_per_block: int = 1

    @property
    def depth(self) -> int:
        return len(self.stage_widths) + 1

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stage_widths)

    def validate(self) -> list[str]:
        out = []
        if len(self.stage_widths) < 1:
            out.append("depth must be at least 2")
        if any(w < 1 for w in self.stage_widths):
            out.append("stage widths must be positive")
        if self.in_channels < 1:
            out.append("in_channels must be positive")
        if self.convs_per_block < 1:
            out.append("convs_per_block must be positive")
        return out


@dataclass(frozen=True)
class ProjectionHeadConfig:
    """1x1-conv embedding head applied to one feature tap."""

    in_channels: int
    out_channels: int = 32
    depth: int = 2

    def validate(self) -> list[str]:
        out = []
        if self.in_channels < 1 or self.out_channels < 1:
            out.append("channel counts must be positive")
        if self.depth < 1:
            out.append("depth must be positive")
        return out


def factor_for_stage(config: NetworkConfig, stage: int) -> int:
    """Spatial downscale factor of decoder stage `stage` (1 = bottleneck)."""
    if not 1 <= stage <= config.depth:
        raise ValueError(f"invalid decoder stage {stage}; valid range 1..{config.depth}")
    return 2 ** (config.depth - stage)


def stage_for_factor(config: NetworkConfig, factor: int) -> int:
    """Decoder stage whose features live at downscale `factor`."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor {factor} is not a power of two")
    stage = config.depth - int(math.log2(factor))
    if stage < 1:
        raise ValueError(f"no decoder stage at factor {factor}")
    return stage


def tap_channels(config: NetworkConfig, stage: int) -> int:
    """Channel count of the named decoder stage's feature map."""
    if not 1 <= stage <= config.depth:
        raise ValueError(f"invalid decoder stage {stage}; valid range 1..{config.depth}")
    if stage == 1:
        return 2 * config.stage_widths[-1]
    return config.stage_widths[config.depth - stage]


def _norm(channels: int) -> nn.Module:
    # group norm keeps behavior independent of batch size and train/eval mode
    return nn.GroupNorm(math.gcd(8, channels), channels)


def _conv_block(in_ch: int, out_ch: int, n_convs: int) -> nn.Sequential:
    layers = []
    ch = in_ch
    for _ in range(n_convs):
        layers += [nn.Conv2d(ch, out_ch, 3, padding=1), _norm(out_ch), nn.ReLU(inplace=True)]
        ch = out_ch
    return nn.Sequential(*layers)


class SegmentationNet(nn.Module):
    """U-shaped network emitting foreground probabilities plus any requested
    decoder-stage feature maps."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        config = config or NetworkConfig()
        problems = config.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.config = config
        widths = config.stage_widths
        n = len(widths)

        enc = []
        ch = config.in_channels
        for w in widths:
            enc.append(_conv_block(ch, w, config.convs_per_block))
            ch = w
        self.encoder = nn.ModuleList(enc)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(widths[-1], 2 * widths[-1], config.convs_per_block)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

        dec = []
        ch = 2 * widths[-1]
        for w in reversed(widths):
            dec.append(_conv_block(ch + w, w, config.convs_per_block))
            ch = w
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor, taps: tuple[int, ...] = ()):
        """Returns (probabilities (B,H,W), {stage: feature tensor}).

        Raises:
            ValueError: invalid tap stage or input not divisible by the
                network's total downsampling factor.
        """
        depth = self.config.depth
        for stage in taps:
            if not 1 <= stage <= depth:
                raise ValueError(f"invalid decoder stage {stage}; valid range 1..{depth}")
        h, w = x.shape[-2:]
        ds = self.config.downsample
        if h % ds or w % ds:
            raise ValueError(f"input shape {h}x{w} not divisible by {ds}")

        skips = []
        for i, block in enumerate(self.encoder):
            x = block(self.pool(x) if i else x)
            skips.append(x)
        x = self.bottleneck(self.pool(x))

        feats = {}
        if 1 in taps:
            feats[1] = x
        for i, block in enumerate(self.decoder):
            x = block(torch.cat([self.up(x), skips[-1 - i]], dim=1))
            stage = i + 2
            if stage in taps:
                feats[stage] = x
        probs = torch.sigmoid(self.head(x)).squeeze(1)
        return probs, feats


class ProjectionHead(nn.Module):
    """Maps a feature tap to an embedding grid of out_channels per pixel.

    Hidden blocks are conv + norm + nonlinearity; the final conv is linear
    so embeddings can point anywhere on the sphere after normalization.
    """

    def __init__(self, config: ProjectionHeadConfig):
        super().__init__()
        problems = config.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.config = config
        width = max(config.in_channels, config.out_channels)
        layers = []
        ch = config.in_channels
        for _ in range(config.depth - 1):
            layers += [nn.Conv2d(ch, width, 1), _norm(width), nn.ReLU(inplace=True)]
            ch = width
        layers.append(nn.Conv2d(ch, config.out_channels, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-3] != self.config.in_channels:
            raise ValueError(f"tap has {feats.shape[-3]} channels, "
                             f"head expects {self.config.in_channels}")
        return self.layers(feats)


def forward_with_taps(net: SegmentationNet, image: ImageGrid,
                      taps: list[int]) -> tuple[PredictionGrid, list[FeatureTap]]:
    """Inference-mode forward pass returning frozen grids instead of tensors."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.array(image.pixels)).unsqueeze(0)
            probs, feats = net(x, taps=tuple(taps))
    finally:
        net.train(was_training)
    pred = PredictionGrid(probs[0].numpy().astype(np.float64))
    tap_list = [FeatureTap(features=feats[s][0].numpy(), tap=s) for s in taps]
    return pred, tap_list


def project(head: ProjectionHead, tap: FeatureTap) -> EmbeddingGrid:
    """Inference-mode projection of one feature tap to an embedding grid."""
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            emb = head(torch.from_numpy(np.array(tap.features)).unsqueeze(0))
    finally:
        head.train(was_training)
    return EmbeddingGrid(emb[0].numpy().astype(np.float64))


def save_checkpoint(path, net: SegmentationNet, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: magic, version, config echo,
    named parameter tensors, plus caller-owned `extra` state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "network_config": asdict(net.config),
        "model_state": {k: v.cpu() for k, v in net.state_dict().items()},
        "extra": extra or {},
    }
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        torch.save(payload, fh)
    return path


def load_checkpoint(path) -> dict:
    """Read a checkpoint payload.

    Raises:
        ValueError: wrong magic or unsupported version.
    """
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path.name}: not a checkpoint (bad magic)")
        version = fh.read(1)[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path.name}: unsupported checkpoint version {version}")
        return torch.load(fh, map_location="cpu", weights_only=False)


def network_from_checkpoint(payload: dict) -> SegmentationNet:
    cfg = payload["network_config"]
    net = SegmentationNet(NetworkConfig(
        stage_widths=tuple(cfg["stage_widths"]),
        in_channels=cfg["in_channels"],
        convs_per_block=cfg["convs_per_block"],
    ))
    net.load_state_dict(payload["model_state"])
    return net
