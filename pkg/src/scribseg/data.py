"""Synthetic blob datasets, scribble synthesis from instance masks,
lossless raster IO, manifests, and k-fold splitting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ImageGrid, ScribbleMap
from .metrics import InstanceMap

__all__ = [
    "SynthConfig",
    "synth_config_from_dict",
    "generate_synthetic",
    "synthesize_scribbles",
    "ManifestRecord",
    "DatasetManifest",
    "DatasetItem",
    "write_dataset",
    "load_dataset",
    "split_folds",
]

# input sizes must divide by the default network's total downsampling
GRID_DIVISOR = 16

SCRIBBLE_UNLABELED, SCRIBBLE_BG, SCRIBBLE_FG = 0, 1, 2


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic nuclei-like blob generator.

    Intensity ranges are disjoint by default so that with distractor_density
    0 the classes are strictly threshold-separable; distractors are drawn
    from the foreground range to break that separability.
    """

    size: tuple[int, int] = (128, 128)
    blobs_per_image: tuple[int, int] = (4, 12)
    radius_range: tuple[float, float] = (5.0, 9.0)
    fg_intensity: tuple[float, float] = (0.55, 0.95)
    bg_intensity: tuple[float, float] = (0.05, 0.45)
    distractor_density: float = 3.0
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> list[str]:
        out = []
        h, w = self.size
        if h <= 0 or w <= 0:
            out.append("size must be positive")
        elif h % GRID_DIVISOR or w % GRID_DIVISOR:
            out.append(f"size not divisible by {GRID_DIVISOR}")
        lo, hi = self.blobs_per_image
        if not (0 < lo <= hi):
            out.append("blob count range invalid")
        rlo, rhi = self.radius_range
        if not (1.0 <= rlo <= rhi):
            out.append("radius range invalid")
        for name, (a, b) in (("fg", self.fg_intensity), ("bg", self.bg_intensity)):
            if not (0.0 <= a <= b <= 1.0):
                out.append(f"{name} intensity range outside [0,1]")
        if self.distractor_density < 0:
            out.append("distractor density negative")
        if self.noise_sigma < 0:
            out.append("noise sigma negative")
        return out


def synth_config_from_dict(d: dict) -> SynthConfig:
    """Build a SynthConfig from parsed JSON, rejecting unknown keys."""
    names = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown config key {unknown[0]!r} for SynthConfig")
    pairs = ("size", "blobs_per_image", "radius_range", "fg_intensity", "bg_intensity")
    kwargs = {k: tuple(v) if k in pairs else v for k, v in d.items()}
    return SynthConfig(**kwargs)


def _quantize16(img: np.ndarray) -> np.ndarray:
    """Snap to the 16-bit raster grid so disk round-trips are bit-exact."""
    levels = np.round(np.clip(img, 0.0, 1.0) * 65535.0)
    return (levels / 65535.0).astype(np.float32)


def _ellipse_mask(shape, cy, cx, a, b, theta):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    return u * u + v * v <= 1.0


def _sample_intensity(rng, rng_lo_hi, shape, sigma):
    lo, hi = rng_lo_hi
    pad = 0.25 * (hi - lo)
    base = rng.uniform(lo + pad, hi - pad)
    vals = base + rng.normal(0.0, sigma, size=shape)
    return np.clip(vals, lo, hi)


def _place_distractor(rng, image, blocked, cfg):
    """Draw one ring or line with foreground-like intensity on free background."""
    h, w = image.shape
    kind = rng.integers(0, 2)
    for _ in range(40):
        if kind == 0:
            r_out = rng.uniform(3.5, 7.0)
            r_in = r_out - rng.uniform(1.0, 2.0)
            cy = rng.uniform(r_out + 1, h - r_out - 1)
            cx = rng.uniform(r_out + 1, w - r_out - 1)
            yy, xx = np.mgrid[0:h, 0:w]
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            m = (d2 <= r_out**2) & (d2 >= r_in**2)
        else:
            length = rng.integers(8, 21)
            theta = rng.uniform(0, np.pi)
            cy = rng.uniform(2, h - 2)
            cx = rng.uniform(2, w - 2)
            t = np.arange(-length / 2, length / 2 + 0.5, 0.5)
            ys = np.clip(np.round(cy + t * np.sin(theta)).astype(int), 0, h - 1)
            xs = np.clip(np.round(cx + t * np.cos(theta)).astype(int), 0, w - 1)
            m = np.zeros((h, w), dtype=bool)
            m[ys, xs] = True
        if not (m & blocked).any():
            image[m] = _sample_intensity(rng, cfg.fg_intensity, int(m.sum()), cfg.noise_sigma)
            return True
    return False


def _generate_one(rng, cfg: SynthConfig):
    h, w = cfg.size
    ids = np.zeros((h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    n_blobs = int(rng.integers(cfg.blobs_per_image[0], cfg.blobs_per_image[1] + 1))
    rlo, rhi = cfg.radius_range
    for k in range(1, n_blobs + 1):
        placed = False
        for _ in range(300):
            a, b = rng.uniform(rlo, rhi), rng.uniform(rlo, rhi)
            theta = rng.uniform(0, np.pi)
            rmax = max(a, b)
            cy = rng.uniform(rmax + 2, h - rmax - 2)
            cx = rng.uniform(rmax + 2, w - rmax - 2)
            m = _ellipse_mask((h, w), cy, cx, a, b, theta)
            if not (m & occupied).any():
                ids[m] = k
                # keep a 2-px moat so instances stay separable components
                occupied |= ndimage.binary_dilation(m, iterations=2)
                placed = True
                break
        if not placed:
            raise ValueError("infeasible packing")

    image = _sample_intensity(rng, cfg.bg_intensity, (h, w), cfg.noise_sigma)
    for k in range(1, n_blobs + 1):
        m = ids == k
        image[m] = _sample_intensity(rng, cfg.fg_intensity, int(m.sum()), cfg.noise_sigma)

    n_distractors = int(rng.poisson(cfg.distractor_density))
    for _ in range(n_distractors):
        _place_distractor(rng, image, occupied, cfg)

    return ImageGrid(_quantize16(image)), InstanceMap(ids)


def generate_synthetic(cfg: SynthConfig, n_images: int) -> list[tuple[ImageGrid, InstanceMap]]:
    """Deterministic image/instance-mask pairs for a fixed config seed.

    Raises:
        ValueError: invalid config, or blob packing is infeasible.
    """
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    streams = np.random.SeedSequence(cfg.seed).spawn(n_images)
    return [_generate_one(np.random.default_rng(s), cfg) for s in streams]


def _walk_stroke(rng, allowed: np.ndarray, max_len: int) -> np.ndarray:
    """Straight pixel stroke inside `allowed`, clipped where it exits."""
    out = np.zeros_like(allowed)
    starts = np.flatnonzero(allowed)
    if starts.size == 0 or max_len < 1:
        return out
    h, w = allowed.shape
    i, j = np.unravel_index(starts[rng.integers(0, starts.size)], allowed.shape)
    theta = rng.uniform(0, 2 * np.pi)
    dy, dx = np.sin(theta), np.cos(theta)
    y, x = float(i), float(j)
    for _ in range(max_len):
        pi, pj = int(round(y)), int(round(x))
        if not (0 <= pi < h and 0 <= pj < w) or not allowed[pi, pj]:
            break
        out[pi, pj] = True
        y += dy
        x += dx
    return out


def _deepest_pixel(mask: np.ndarray) -> tuple[int, int]:
    dist = ndimage.distance_transform_cdt(mask, metric="taxicab")
    return np.unravel_index(int(np.argmax(dist)), mask.shape)


def synthesize_scribbles(instances: InstanceMap, stroke_width: int = 1,
                         coverage: float = 0.01, seed: int = 0) -> ScribbleMap:
    """Scribbles derived from a full mask: one stroke per instance, kept
    inside the erosion-safe interior, plus background strokes filling the
    pixel budget implied by `coverage`.

    Instances too small to erode get a single deepest-interior pixel.

    Raises:
        ValueError: non-positive stroke width or coverage outside (0,1).
    """
    if stroke_width < 1:
        raise ValueError("stroke width must be at least 1")
    if not (0.0 < coverage < 1.0):
        raise ValueError("coverage must be in (0,1)")
    rng = np.random.default_rng(seed)
    ids = instances.ids
    h, w = ids.shape
    target = max(2, int(round(coverage * h * w)))
    n_inst = instances.count

    fg = np.zeros((h, w), dtype=bool)
    per_stroke = max(1, target // 2 // max(n_inst, 1))
    for k in range(1, n_inst + 1):
        inst = ids == k
        interior = ndimage.binary_erosion(inst, iterations=stroke_width)
        if not interior.any():
            fg[_deepest_pixel(inst)] = True
            continue
        stroke = _walk_stroke(rng, interior, per_stroke)
        if not stroke.any():
            stroke[_deepest_pixel(inst)] = True
        if stroke_width > 1:
            stroke = ndimage.binary_dilation(stroke, iterations=stroke_width - 1)
        fg |= stroke

    bg = np.zeros((h, w), dtype=bool)
    bg_allowed = ndimage.binary_erosion(ids == 0, iterations=max(1, stroke_width))
    budget = max(target - int(fg.sum()), 4)
    for _ in range(1000):
        remaining = budget - int(bg.sum())
        if remaining <= 0:
            break
        stroke = _walk_stroke(rng, bg_allowed & ~bg, min(remaining, int(rng.integers(8, 17))))
        if stroke_width > 1:
            stroke = ndimage.binary_dilation(stroke, iterations=stroke_width - 1) & bg_allowed
        bg |= stroke
    return ScribbleMap(fg=fg, bg=bg & ~fg)


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    mask: str | None = None
    scribble: str | None = None
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    """Tab-separated index of a dataset on disk; paths relative to root."""

    root: Path
    records: tuple[ManifestRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def serialize(self) -> str:
        lines = ["\t".join([r.image, r.mask or "-", r.scribble or "-", r.split])
                 for r in self.records]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize())
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"manifest line {lineno}: expected 4 tab-separated fields")
            image, mask, scribble, split = parts
            records.append(ManifestRecord(
                image=image,
                mask=None if mask == "-" else mask,
                scribble=None if scribble == "-" else scribble,
                split=split,
            ))
        return cls(root=path.parent, records=tuple(records))

    def validate(self) -> list[str]:
        out = []
        for r in self.records:
            for p in (r.image, r.mask, r.scribble):
                if p is not None and not (self.root / p).exists():
                    out.append(f"missing file: {p}")
            if r.split == "train" and r.mask is None and r.scribble is None:
                out.append(f"train record {r.image} has neither scribble nor mask")
        return out

    def subset(self, indices, split: str | None = None) -> "DatasetManifest":
        recs = [self.records[i] for i in indices]
        if split is not None:
            recs = [replace(r, split=split) for r in recs]
        return DatasetManifest(root=self.root, records=tuple(recs))


def _write_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format not in ("PNG", "TIFF"):
            raise ValueError(f"{path.name}: only lossless PNG/TIFF rasters are accepted")
        return np.array(im)


def _normalize_image(arr: np.ndarray, channels: int) -> np.ndarray:
    if arr.dtype == np.uint8:
        scaled = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        scaled = arr.astype(np.float64) / 65535.0
    else:
        raise ValueError(f"unsupported raster dtype {arr.dtype}")
    if scaled.ndim == 2:
        planes = scaled[None]
    else:
        planes = np.moveaxis(scaled, -1, 0)[:3]
    if channels == 1 and planes.shape[0] > 1:
        planes = planes.mean(axis=0, keepdims=True)
    elif planes.shape[0] == 1 and channels > 1:
        planes = np.repeat(planes, channels, axis=0)
    elif planes.shape[0] != channels:
        raise ValueError(f"cannot adapt {planes.shape[0]}-channel raster to {channels} channels")
    return planes.astype(np.float32)


def write_dataset(samples, out_dir, stroke_width: int = 1, coverage: float = 0.01,
                  scribble_seed: int = 0, split="train") -> DatasetManifest:
    """Write image/mask/scribble rasters plus manifest.tsv; returns the manifest.

    Images go out as 16-bit grayscale PNG, masks as 16-bit instance ids,
    scribbles as 8-bit rasters (0 unlabeled, 1 bg stroke, 2 fg stroke).
    `split` is one tag for every record or a per-record sequence.
    """
    out_dir = Path(out_dir)
    splits = [split] * len(samples) if isinstance(split, str) else list(split)
    if len(splits) != len(samples):
        raise ValueError("one split tag per sample required")
    records = []
    for i, (image, instances) in enumerate(samples):
        if image.channels != 1:
            raise ValueError("dataset writer expects single-channel images")
        name = f"{i:04d}"
        img_rel, mask_rel, scr_rel = (f"images/{name}.png", f"masks/{name}.png",
                                      f"scribbles/{name}.png")
        _write_png(out_dir / img_rel,
                   np.round(image.pixels[0].astype(np.float64) * 65535.0).astype(np.uint16))
        _write_png(out_dir / mask_rel, instances.ids.astype(np.uint16))
        scribbles = synthesize_scribbles(instances, stroke_width=stroke_width,
                                         coverage=coverage, seed=scribble_seed + i)
        raster = np.full(instances.shape, SCRIBBLE_UNLABELED, dtype=np.uint8)
        raster[scribbles.bg] = SCRIBBLE_BG
        raster[scribbles.fg] = SCRIBBLE_FG
        _write_png(out_dir / scr_rel, raster)
        records.append(ManifestRecord(image=img_rel, mask=mask_rel,
                                      scribble=scr_rel, split=splits[i]))
    manifest = DatasetManifest(root=out_dir, records=tuple(records))
    manifest.write()
    return manifest


@dataclass(frozen=True)
class DatasetItem:
    name: str
    image: ImageGrid
    scribbles: ScribbleMap | None
    instances: InstanceMap | None
    split: str = "train"


def _read_scribbles(path: Path) -> ScribbleMap:
    arr = _read_raster(path)
    unknown = set(np.unique(arr).tolist()) - {SCRIBBLE_UNLABELED, SCRIBBLE_BG, SCRIBBLE_FG}
    if unknown:
        raise ValueError(f"unexpected scribble raster values {sorted(unknown)}")
    return ScribbleMap(fg=arr == SCRIBBLE_FG, bg=arr == SCRIBBLE_BG)


def _read_instances(path: Path) -> InstanceMap:
    arr = _read_raster(path).astype(np.int64)
    present = np.unique(arr[arr > 0])
    remap = np.zeros(int(arr.max(initial=0)) + 1, dtype=np.int32)
    remap[present] = np.arange(1, present.size + 1, dtype=np.int32)
    return InstanceMap(remap[arr])


def load_dataset(manifest: DatasetManifest, channels: int = 1) -> list[DatasetItem]:
    """Materialize manifest records as grids.

    Missing scribbles are synthesized from the mask with a per-record
    deterministic seed so repeated loads agree.

    Raises:
        ValueError: unreadable or mismatched rasters, or invalid manifest.
    """
    problems = manifest.validate()
    if problems:
        raise ValueError("; ".join(problems))
    items = []
    for idx, rec in enumerate(manifest.records):
        image = ImageGrid(_normalize_image(_read_raster(manifest.root / rec.image), channels))
        instances = _read_instances(manifest.root / rec.mask) if rec.mask else None
        if rec.scribble:
            scribbles = _read_scribbles(manifest.root / rec.scribble)
        elif instances is not None:
            scribbles = synthesize_scribbles(instances, seed=idx)
        else:
            scribbles = None
        img_shape = (image.height, image.width)
        for grid in (instances, scribbles):
            if grid is not None and grid.shape != img_shape:
                raise ValueError(f"{rec.image}: label shape {grid.shape} "
                                 f"does not match image shape {img_shape}")
        items.append(DatasetItem(name=Path(rec.image).stem, image=image,
                                 scribbles=scribbles, instances=instances,
                                 split=rec.split))
    return items


def split_folds(manifest: DatasetManifest, k: int, seed: int = 0):
    """Deterministic k-fold split: k (train, val) manifest pairs with
    disjoint, exhaustive validation folds whose sizes differ by at most 1.

    Raises:
        ValueError: k < 2 or k exceeds the record count.
    """
    n = len(manifest)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError("k exceeds record count")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val_idx = sorted(folds[i].tolist())
        train_idx = sorted(np.concatenate([folds[j] for j in range(k) if j != i]).tolist())
        out.append((manifest.subset(train_idx, split="train"),
                    manifest.subset(val_idx, split="val")))
    return out
