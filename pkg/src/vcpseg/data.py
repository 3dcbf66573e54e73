"""Dataset discovery, preprocessing, and a deterministic synthetic-defect corpus.

Directory contract (MVTec-AD style)::

    <root>/<product>/<split>/<defect_type>/<image>
    <root>/<product>/ground_truth/<defect_type>/<image stem>_mask.png

``defect_type == "good"`` marks normal images, which carry no mask.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
GOOD = "good"


@dataclass(frozen=True)
class Sample:
    image_path: str
    mask_path: str | None
    product: str
    split: str
    defect_type: str

    @property
    def label(self) -> str:
        return "normal" if self.defect_type == GOOD else "anomalous"


@dataclass(frozen=True)
class PreprocessSpec:
    size: tuple[int, int] = (518, 518)
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    mask_threshold: float = 0.5

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("channel stds must be positive")


def scan_dataset(root, splits: tuple[str, ...] | None = None) -> list[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    samples = []
    for product in sorted(p for p in root.iterdir() if p.is_dir()):
        for split_dir in sorted(p for p in product.iterdir() if p.is_dir() and p.name != "ground_truth"):
            if splits is not None and split_dir.name not in splits:
                continue
            for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                for img in sorted(defect_dir.iterdir()):
                    if img.suffix.lower() not in IMAGE_EXTENSIONS:
                        continue
                    mask = None
                    if defect_dir.name != GOOD:
                        candidate = product / "ground_truth" / defect_dir.name / f"{img.stem}_mask.png"
                        if not candidate.is_file():
                            raise DataError(f"anomalous image without mask: {img} (expected {candidate})")
                        mask = str(candidate)
                    samples.append(Sample(str(img), mask, product.name, split_dir.name, defect_dir.name))
    return samples


def _open(path: str) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def load_image(path: str, spec: PreprocessSpec = PreprocessSpec()) -> torch.Tensor:
    """``(3, h, w)`` float32, bilinear-resized and channel-standardized."""
    im = _open(path).convert("RGB")
    h, w = spec.size
    im = im.resize((w, h), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(spec.mean, np.float32)) / np.asarray(spec.std, np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def load_mask(path: str | None, spec: PreprocessSpec = PreprocessSpec()) -> torch.Tensor:
    """``(h, w)`` binary mask; nonzero source pixels are anomalous. ``None`` gives all zeros."""
    h, w = spec.size
    if path is None:
        return torch.zeros(h, w, dtype=torch.uint8)
    m = np.asarray(_open(path).convert("L")) > 0
    m = Image.fromarray(m.astype(np.uint8)).resize((w, h), Image.NEAREST)
    return torch.from_numpy((np.asarray(m, dtype=np.float32) > spec.mask_threshold).astype(np.uint8))


def load_sample(sample: Sample, spec: PreprocessSpec = PreprocessSpec()) -> tuple[torch.Tensor, torch.Tensor]:
    image = load_image(sample.image_path, spec)
    mask = load_mask(sample.mask_path, spec)
    if sample.label == "anomalous" and not mask.any():
        raise DataError(f"mask of {sample.image_path} is empty after resizing to {spec.size}")
    return image, mask


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("VCPSEG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_batch(samples, spec: PreprocessSpec = PreprocessSpec()) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into ``(B, 3, h, w)`` images and ``(B, h, w)`` masks, preserving order."""
    samples = list(samples)
    workers = min(num_workers(), len(samples)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(lambda s: load_sample(s, spec), samples))
    else:
        pairs = [load_sample(s, spec) for s in samples]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


# -- synthetic corpus -----------------------------------------------------------

@dataclass
class SynthConfig:
    root: str = "synth"
    seed: int = 0
    count: int = 8
    image_size: int = 64
    products: list[str] = field(default_factory=lambda: ["synth"])
    defect_shapes: list[str] = field(default_factory=lambda: ["rect", "ellipse"])
    split: str = "test"
    min_area: float = 0.01
    max_area: float = 0.10


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.35, 0.65, size=3)
    freq = rng.uniform(0.15, 0.45, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.06 * np.sin(freq[0] * xx + freq[1] * yy + phase)
    noise = rng.normal(0.0, 0.03, size=(size, size, 3))
    return np.clip(base + stripes[..., None] + noise, 0.0, 1.0)


def _defect_mask(rng: np.random.Generator, size: int, shape: str, lo: float, hi: float) -> np.ndarray:
    total = size * size
    for _ in range(1000):
        frac = rng.uniform(lo * 1.2, hi * 0.8)
        aspect = rng.uniform(0.6, 1.6)
        area = frac * total / (np.pi / 4 if shape == "ellipse" else 1.0)
        hgt = max(3, int(round(np.sqrt(area / aspect))))
        wid = max(3, int(round(hgt * aspect)))
        if hgt >= size - 2 or wid >= size - 2:
            continue
        top = int(rng.integers(1, size - hgt - 1))
        left = int(rng.integers(1, size - wid - 1))
        mask = np.zeros((size, size), dtype=bool)
        if shape == "rect":
            mask[top : top + hgt, left : left + wid] = True
        elif shape == "ellipse":
            yy, xx = np.mgrid[0:size, 0:size]
            cy, cx = top + (hgt - 1) / 2, left + (wid - 1) / 2
            mask = ((yy - cy) / (hgt / 2)) ** 2 + ((xx - cx) / (wid / 2)) ** 2 <= 1.0
        else:
            raise ValueError(f"unknown defect shape {shape!r}")
        if lo <= mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place a defect within the area bounds")


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Write a textured-background corpus with high-contrast defects and exact masks.

    Even indices are normal, odd indices defective, so ``count // 2`` images per
    product have all-zero masks (rounded up for odd counts).
    """
    root = Path(cfg.root)
    size = int(cfg.image_size)
    for p_idx, product in enumerate(cfg.products):
        rng = np.random.default_rng([int(cfg.seed), p_idx])
        for i in range(int(cfg.count)):
            img = _background(rng, size)
            defective = i % 2 == 1
            kind = GOOD
            if defective:
                shape = cfg.defect_shapes[int(rng.integers(len(cfg.defect_shapes)))]
                mask = _defect_mask(rng, size, shape, cfg.min_area, cfg.max_area)
                color = rng.uniform(0, 1, size=3)
                # push the defect colour far from the background mean
                color = np.where(img.mean(axis=(0, 1)) > 0.5, color * 0.25, 0.75 + color * 0.25)
                img[mask] = color
                kind = "defect"
                gt_dir = root / product / "ground_truth" / kind
                gt_dir.mkdir(parents=True, exist_ok=True)
                Image.fromarray((mask * 255).astype(np.uint8)).save(gt_dir / f"{i:03d}_mask.png")
            out_dir = root / product / cfg.split / kind
            out_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray((img * 255).round().astype(np.uint8)).save(out_dir / f"{i:03d}.png")
    return scan_dataset(root, (cfg.split,))
