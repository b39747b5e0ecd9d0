"""Seeded synthetic change pairs with known masks.

A base texture is blurred uniform noise.  The second image is the base
with a per-channel photometric jitter and per-pixel Gaussian noise.  Change
pairs additionally get one to three flat-coloured rectangles or ellipses
painted into one of the two images.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io import Record, write_image, write_manifest, write_mask

MIN_SIZE = 16
JITTER = 0.03
MIN_COLOR_GAP = 0.35


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named component and optional indices."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, index)])


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 100
    size: int = 64
    change_rate: float = 0.5
    noise: float = 0.02
    jitter: float = JITTER
    seed: int = 0

    def __post_init__(self):
        if self.size < MIN_SIZE:
            raise ValueError(f"size must be at least {MIN_SIZE}")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ValueError("change_rate must lie in [0, 1]")
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be non-negative")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")


@dataclass(frozen=True, eq=False)
class SynthPair:
    image_a: np.ndarray
    image_b: np.ndarray
    mask: np.ndarray
    y: int


def base_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.random((size, size, 3))
    smooth = gaussian_filter(noise, sigma=(size / 16.0, size / 16.0, 0.0), mode="wrap")
    lo = smooth.min(axis=(0, 1))
    hi = smooth.max(axis=(0, 1))
    return 0.15 + 0.7 * (smooth - lo) / np.maximum(hi - lo, 1e-12)


def shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    h, w = rng.integers(size // 8, size // 3 + 1, size=2)
    top = rng.integers(0, size - h + 1)
    left = rng.integers(0, size - w + 1)
    mask = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        mask[top : top + h, left : left + w] = True
    else:
        rows, cols = np.mgrid[0:size, 0:size]
        cy, cx = top + (h - 1) / 2.0, left + (w - 1) / 2.0
        mask = ((rows - cy) / (h / 2.0)) ** 2 + ((cols - cx) / (w / 2.0)) ** 2 <= 1.0
    return mask


def distinct_color(rng: np.random.Generator, region: np.ndarray) -> np.ndarray:
    """Uniform colour at least MIN_COLOR_GAP from the region's mean colour."""
    ref = region.mean(axis=0)
    while True:
        color = rng.random(3)
        if np.linalg.norm(color - ref) >= MIN_COLOR_GAP:
            return color


def make_pair(config: SynthConfig, index: int) -> SynthPair:
    rng = substream(config.seed, "generator", index)
    size = config.size
    base = base_texture(rng, size)
    changed = rng.random() < config.change_rate
    jitter = rng.uniform(-config.jitter, config.jitter, size=3)
    noise = rng.normal(0.0, config.noise, size=base.shape) if config.noise else 0.0
    image_a = base.copy()
    image_b = np.clip(base + jitter + noise, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=np.uint8)
    if changed:
        target = image_a if rng.random() < 0.5 else image_b
        for _ in range(rng.integers(1, 4)):
            region = shape_mask(rng, size)
            target[region] = distinct_color(rng, target[region])
            mask[region] = 1
    return SynthPair(image_a, image_b, mask, int(changed))


def generate(config: SynthConfig) -> list[SynthPair]:
    return [make_pair(config, i) for i in range(config.n_pairs)]


def write_corpus(config: SynthConfig, out_dir: str | Path, prefix: str = "pair") -> Path:
    """Write images, masks and ``manifest.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    records = []
    width = len(str(config.n_pairs - 1))
    for i in range(config.n_pairs):
        pair = make_pair(config, i)
        rid = f"{prefix}{i:0{width}d}"
        path_a = out_dir / "images" / f"{rid}_a.png"
        path_b = out_dir / "images" / f"{rid}_b.png"
        mask_path = out_dir / "masks" / f"{rid}.png"
        write_image(path_a, pair.image_a)
        write_image(path_b, pair.image_b)
        write_mask(mask_path, pair.mask)
        records.append(Record(rid, path_a, path_b, pair.y, gt_mask_path=mask_path))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
