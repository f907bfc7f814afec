"""Heatmap export: colormapped PNG plus the raw float32 map as ``.npy``."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .scoring import AnomalyMap


def safe_stem(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "__", sample_id).strip("_") or "sample"


def colorize(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """H x W map in [0, 1] -> H x W x 3 uint8."""
    rgba = colormaps[cmap](np.clip(values, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def export_heatmap(
    amap: AnomalyMap,
    out_dir: str | Path,
    sample_id: str,
    image: np.ndarray | None = None,
    alpha: float = 0.5,
    cmap: str = "viridis",
) -> tuple[Path, Path]:
    """Write ``<id>.png`` and ``<id>.npy``; blend over ``image`` (H x W x 3 uint8) when given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = safe_stem(sample_id)
    rgb = colorize(amap.values, cmap)
    if image is not None:
        if image.shape[:2] != rgb.shape[:2]:
            image = np.asarray(Image.fromarray(image).resize(rgb.shape[1::-1], Image.BILINEAR))
        rgb = (alpha * rgb + (1 - alpha) * image[..., :3]).round().astype(np.uint8)
    png = out_dir / f"{stem}.png"
    npy = out_dir / f"{stem}.npy"
    Image.fromarray(rgb).save(png)
    np.save(npy, amap.values.astype(np.float32))
    return png, npy
