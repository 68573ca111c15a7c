"""
Deterministic synthetic dataset for weakly supervised localization.
Each image holds one textured shape on a cluttered background; the class is the shape kind.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from .localization import BBox
from .storage import save_png

logger = logging.getLogger(__name__)

CLASS_NAMES = ("circle", "square", "triangle", "cross")
MIN_AREA_FRACTION = 0.05
MAX_AREA_FRACTION = 0.50


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator; defaults give 64x64 images."""
    image_size: int = 64
    shape_min: int = 18
    shape_max: int = 44
    speckles: int = 40
    clutter: float = 0.35
    max_attempts: int = 50

    def validate(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not 2 <= self.shape_min <= self.shape_max:
            raise ValueError(f"need 2 <= shape_min <= shape_max, got {self.shape_min}..{self.shape_max}")
        if self.shape_max > self.image_size:
            raise ValueError(f"shape_max {self.shape_max} does not fit in a {self.image_size}px image")
        area = self.image_size ** 2
        # a full square of the largest extent must still reach the minimum area
        if self.shape_max ** 2 < MIN_AREA_FRACTION * area:
            raise ValueError(f"shape_max {self.shape_max} cannot cover {MIN_AREA_FRACTION:.0%} of the image")
        if self.shape_min ** 2 * 0.3 > MAX_AREA_FRACTION * area:
            raise ValueError(f"shape_min {self.shape_min} always exceeds {MAX_AREA_FRACTION:.0%} of the image")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError(f"clutter must lie in [0, 1], got {self.clutter}")


@dataclass
class Sample:
    """One rendered image with its image-level label and held-out box."""
    index: int
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int
    gt_box: BBox
    mask: np.ndarray  # (H, W) bool, shape pixels

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


def _class_for_index(seed: int, index: int) -> int:
    # balanced blocks of four, shuffled per block
    block_rng = np.random.default_rng([seed, index // len(CLASS_NAMES), 1])
    return int(block_rng.permutation(len(CLASS_NAMES))[index % len(CLASS_NAMES)])


def _shape_mask(kind: str, x0: int, y0: int, extent: int, size: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    x1, y1 = x0 + extent - 1, y0 + extent - 1
    if kind == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == "square":
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == "triangle":
        draw.polygon([(x0 + (extent - 1) / 2, y0), (x1, y1), (x0, y1)], fill=255)
    else:
        bar = max(2, extent // 3)
        lo = (extent - bar) // 2
        draw.rectangle([x0 + lo, y0, x0 + lo + bar - 1, y1], fill=255)
        draw.rectangle([x0, y0 + lo, x1, y0 + lo + bar - 1], fill=255)
    return np.array(canvas) > 0


def _background(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    size = config.image_size
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    low_freq = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.Resampling.BILINEAR)
    base = np.asarray(low_freq, dtype=np.float32) / 255.0
    mid = 0.5 + (base - 0.5) * config.clutter
    image = mid.copy()
    for _ in range(config.speckles):
        y, x = rng.integers(0, size - 1, size=2)
        image[y:y + 2, x:x + 2] = rng.uniform(0.0, 1.0, size=3)
    return image


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    color = rng.uniform(0.15, 1.0, size=3)
    period = rng.uniform(3.0, 8.0)
    angle = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = 0.5 + 0.5 * np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period)
    return np.clip(color[None, None, :] * (0.75 + 0.25 * stripes[..., None]), 0.0, 1.0)


def render_sample(seed: int, index: int, config: Optional[SynthConfig] = None) -> Sample:
    """
    Render the sample for (seed, index); the result depends on nothing else.

    Args:
        seed (int): Dataset seed
        index (int): Sample index
        config (SynthConfig): Generator settings

    Returns:
        Sample: Image, label, tight ground-truth box and shape mask
    """
    config = config or SynthConfig()
    size = config.image_size
    rng = np.random.default_rng([seed, index, 0])
    label = _class_for_index(seed, index)
    kind = CLASS_NAMES[label]

    for _ in range(config.max_attempts):
        extent = int(rng.integers(config.shape_min, config.shape_max + 1))
        x0 = int(rng.integers(0, size - extent + 1))
        y0 = int(rng.integers(0, size - extent + 1))
        mask = _shape_mask(kind, x0, y0, extent, size)
        fraction = mask.mean()
        if MIN_AREA_FRACTION <= fraction <= MAX_AREA_FRACTION:
            break
    else:
        raise ValueError(f"could not place a {kind} for sample {index} within "
                         f"{config.max_attempts} attempts; check shape_min/shape_max")

    image = _background(rng, config)
    texture = _texture(rng, size)
    image[mask] = texture[mask]

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))
    return Sample(index=index, image=np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32),
                  label=label, gt_box=box, mask=mask)


def generate(n: int, seed: int, config: Optional[SynthConfig] = None, start: int = 0) -> List[Sample]:
    """
    Generate samples for indices start .. start + n - 1.

    Train and test splits use disjoint index ranges of the same seed.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    config = config or SynthConfig()
    config.validate()
    samples = [render_sample(seed, start + i, config) for i in range(n)]
    logger.info(f"Generated {n} samples (indices {start}..{start + n - 1}, seed {seed})")
    return samples


def to_arrays(samples: List[Sample]) -> Tuple[np.ndarray, np.ndarray, pd.DataFrame]:
    """Stack samples into an image batch, a label vector and a manifest frame."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels, manifest_frame(samples)


def manifest_frame(samples: List[Sample]) -> pd.DataFrame:
    return pd.DataFrame({
        "index": [s.index for s in samples],
        "label": [s.label for s in samples],
        "x_min": [s.gt_box.x_min for s in samples],
        "y_min": [s.gt_box.y_min for s in samples],
        "x_max": [s.gt_box.x_max for s in samples],
        "y_max": [s.gt_box.y_max for s in samples],
    })


def dump_dataset(samples: List[Sample], directory: Path) -> Path:
    """Write one PNG per image plus manifest.txt with index,label,x_min,y_min,x_max,y_max."""
    directory = Path(directory)
    for s in samples:
        save_png(directory / f"{s.index:05d}.png", np.round(s.image.transpose(1, 2, 0) * 255))
    manifest = directory / "manifest.txt"
    manifest_frame(samples).to_csv(manifest, index=False)
    logger.info(f"Dumped {len(samples)} images to {directory}")
    return manifest
