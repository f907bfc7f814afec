"""Dataset manifests, preprocessing, the synthetic generator and layout converters."""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .encoder import BackboneConfig
from .errors import AssetError, DataError, ValidationError

MANIFEST_VERSION = 1
DOMAIN_TAGS = ("industrial", "medical")
ANNOTATION_LEVELS = ("image_only", "pixel_only", "both")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
NORMAL_DIR_NAMES = ("good", "normal", "no", "healthy", "ok")


@dataclass
class SampleEntry:
    id: str
    category: str
    image_path: Path
    label: int
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    name: str
    domain_tag: str
    categories: list[str]
    samples: list[SampleEntry]
    annotation_level: str = "both"
    root: Path = field(default_factory=Path.cwd)
    notes: str = ""

    @property
    def has_image_labels(self) -> bool:
        return self.annotation_level in ("image_only", "both")

    @property
    def has_pixel_labels(self) -> bool:
        return self.annotation_level in ("pixel_only", "both")

    def by_category(self) -> dict[str, list[SampleEntry]]:
        out: dict[str, list[SampleEntry]] = {c: [] for c in self.categories}
        for s in self.samples:
            out.setdefault(s.category, []).append(s)
        return out

    def to_dict(self) -> dict[str, Any]:
        def rel(p: Path | None) -> str | None:
            if p is None:
                return None
            return Path(os.path.relpath(Path(p).resolve(), self.root.resolve())).as_posix()

        return {
            "manifest_version": MANIFEST_VERSION,
            "name": self.name,
            "domain_tag": self.domain_tag,
            "annotation_level": self.annotation_level,
            "categories": list(self.categories),
            "notes": self.notes,
            "samples": [
                {
                    "id": s.id,
                    "category": s.category,
                    "image_path": rel(s.image_path),
                    "label": int(s.label),
                    **({"mask_path": rel(s.mask_path)} if s.mask_path is not None else {}),
                }
                for s in self.samples
            ],
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.root = path.parent
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a manifest; every violation is reported in one error."""
    path = Path(path)
    if not path.exists():
        raise AssetError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    root = path.parent
    problems: list[str] = []

    if raw.get("manifest_version") != MANIFEST_VERSION:
        problems.append(f"manifest_version must be {MANIFEST_VERSION}, got {raw.get('manifest_version')!r}")
    for key in ("name", "domain_tag", "categories", "samples", "annotation_level"):
        if key not in raw:
            problems.append(f"missing field {key!r}")
    if problems and any(p.startswith("missing") for p in problems):
        raise ValidationError(f"invalid manifest {path}", problems)

    if raw["domain_tag"] not in DOMAIN_TAGS:
        problems.append(f"domain_tag must be one of {DOMAIN_TAGS}, got {raw['domain_tag']!r}")
    level = raw["annotation_level"]
    if level not in ANNOTATION_LEVELS:
        problems.append(f"annotation_level must be one of {ANNOTATION_LEVELS}, got {level!r}")
    categories = list(raw["categories"])
    if not categories:
        problems.append("categories is empty")

    samples: list[SampleEntry] = []
    seen: set[str] = set()
    for i, s in enumerate(raw["samples"]):
        sid = s.get("id", f"<sample #{i}>")
        missing = [k for k in ("id", "category", "image_path", "label") if k not in s]
        if missing:
            problems.append(f"{sid}: missing fields {missing}")
            continue
        if sid in seen:
            problems.append(f"{sid}: duplicate id")
        seen.add(sid)
        if s["category"] not in categories:
            problems.append(f"{sid}: category {s['category']!r} not in categories")
        if s["label"] not in (0, 1):
            problems.append(f"{sid}: label must be 0 or 1, got {s['label']!r}")
        image_path = root / s["image_path"]
        if not image_path.exists():
            problems.append(f"{sid}: image not found: {image_path}")
        mask_path = root / s["mask_path"] if s.get("mask_path") else None
        if mask_path is not None and not mask_path.exists():
            problems.append(f"{sid}: mask not found: {mask_path}")
        if s["label"] == 1 and mask_path is None and level in ("pixel_only", "both"):
            problems.append(f"{sid}: anomalous sample needs mask_path under annotation_level={level}")
        samples.append(SampleEntry(sid, s["category"], image_path, int(s["label"]), mask_path))
    if not raw["samples"]:
        problems.append("samples is empty")
    if problems:
        raise ValidationError(f"invalid manifest {path}", problems)
    return DatasetManifest(
        name=raw["name"],
        domain_tag=raw["domain_tag"],
        categories=categories,
        samples=samples,
        annotation_level=level,
        root=root,
        notes=raw.get("notes", ""),
    )


@dataclass
class Sample:
    image: torch.Tensor  # C x H x W, normalized
    label: int
    mask: np.ndarray | None  # H x W bool
    id: str
    category: str


@dataclass(frozen=True)
class Preprocessor:
    """Resize + per-channel normalization shared by training and evaluation."""

    resolution: int
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def from_config(cls, config: BackboneConfig) -> "Preprocessor":
        return cls(config.input_resolution, tuple(config.normalization_mean), tuple(config.normalization_std))

    def fingerprint(self) -> str:
        desc = json.dumps(
            {"op": "pil-bilinear-rgb/nearest-mask@0.5", "r": self.resolution, "mean": self.mean, "std": self.std},
            sort_keys=True,
        )
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    def load_rgb(self, path: Path) -> np.ndarray:
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode image {path}: {exc}") from exc

    def image(self, path: Path) -> torch.Tensor:
        rgb = Image.fromarray(self.load_rgb(path))
        r = self.resolution
        arr = np.asarray(rgb.resize((r, r), Image.BILINEAR), dtype=np.float32) / 255.0
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        arr = (arr - mean) / std
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))

    def mask(self, path: Path) -> np.ndarray:
        try:
            with Image.open(path) as im:
                m = im.convert("L")
                r = self.resolution
                arr = np.asarray(m.resize((r, r), Image.NEAREST), dtype=np.float32) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode mask {path}: {exc}") from exc
        return arr > 0.5


def load_sample(entry: SampleEntry, config: BackboneConfig | Preprocessor) -> Sample:
    """Preprocess one manifest entry.

    Normal samples without a mask file get an all-zero mask; anomalous samples
    without one keep ``mask=None``.
    """
    pre = config if isinstance(config, Preprocessor) else Preprocessor.from_config(config)
    image = pre.image(entry.image_path)
    if entry.mask_path is not None:
        mask = pre.mask(entry.mask_path)
    elif entry.label == 0:
        mask = np.zeros((pre.resolution, pre.resolution), dtype=bool)
    else:
        mask = None
    return Sample(image, entry.label, mask, entry.id, entry.category)


class ManifestDataset(SequenceABC):
    """Lazy, indexable view of a manifest's preprocessed samples."""

    def __init__(self, manifest: DatasetManifest, preprocessor: Preprocessor, cache: bool = True):
        self.manifest = manifest
        self.preprocessor = preprocessor
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = load_sample(self.manifest.samples[i], self.preprocessor)
        if self._cache is not None:
            self._cache[i] = s
        return s

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.30, 0.45)
    img = np.full((size, size), base)
    for _ in range(3):
        fx, fy = rng.uniform(2, 9, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += 0.03 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img += rng.normal(0, 0.015, size=(size, size))
    tint = rng.uniform(-0.03, 0.03, size=3)
    return np.clip(img[..., None] + tint, 0, 1)


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_normal: int,
    n_anomalous: int,
    image_size: int = 128,
    seed: int = 0,
    name: str = "synthetic",
    category: str = "tile",
) -> DatasetManifest:
    """Write textured images, some with 1-3 bright rectangles, plus exact masks and a manifest."""
    if n_normal < 1 or n_anomalous < 1 or image_size < 16:
        raise ValidationError("n_normal and n_anomalous must be >= 1 and image_size >= 16")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    lo, hi = max(4, image_size // 8), max(6, image_size // 3)
    for label, count in ((0, n_normal), (1, n_anomalous)):
        for k in range(count):
            sid = f"{'anomalous' if label else 'normal'}_{k:04d}"
            img = _texture(rng, image_size)
            mask_path = None
            if label:
                mask = np.zeros((image_size, image_size), dtype=bool)
                for _ in range(int(rng.integers(1, 4))):
                    h, w = rng.integers(lo, hi + 1, size=2)
                    y0 = int(rng.integers(0, image_size - h + 1))
                    x0 = int(rng.integers(0, image_size - w + 1))
                    mask[y0 : y0 + h, x0 : x0 + w] = True
                bright = rng.uniform(0.85, 0.98) + rng.normal(0, 0.015, size=(image_size, image_size, 1))
                img = np.where(mask[..., None], np.clip(bright, 0, 1), img)
                mask_path = out_dir / "masks" / f"{sid}_mask.png"
                Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
            image_path = out_dir / "images" / f"{sid}.png"
            Image.fromarray((img * 255).round().astype(np.uint8)).save(image_path)
            samples.append(SampleEntry(sid, category, image_path, label, mask_path))
    manifest = DatasetManifest(
        name=name,
        domain_tag="industrial",
        categories=[category],
        samples=samples,
        annotation_level="both",
        root=out_dir,
        notes=f"synthetic: seed={seed}, image_size={image_size}",
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def convert_mvtec(
    root: str | Path,
    name: str = "mvtec",
    split: str = "test",
    domain_tag: str = "industrial",
) -> DatasetManifest:
    """MVTec-style tree: ``<category>/<split>/<defect>/*.png`` with masks in
    ``<category>/ground_truth/<defect>/<stem>_mask.png``; ``good`` is normal."""
    root = Path(root)
    if not root.is_dir():
        raise AssetError(f"dataset root not found: {root}")
    splits = ("train", "test") if split == "all" else (split,)
    categories, samples, problems = [], [], []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not any((cat_dir / s).is_dir() for s in splits):
            continue
        categories.append(cat_dir.name)
        for sp in splits:
            split_dir = cat_dir / sp
            if not split_dir.is_dir():
                continue
            for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                label = 0 if defect_dir.name == "good" else 1
                for img in _images_in(defect_dir):
                    mask = None
                    if label:
                        mask = cat_dir / "ground_truth" / defect_dir.name / f"{img.stem}_mask.png"
                        if not mask.exists():
                            problems.append(f"missing mask {mask}")
                            mask = None
                    sid = f"{cat_dir.name}/{sp}/{defect_dir.name}/{img.stem}"
                    samples.append(SampleEntry(sid, cat_dir.name, img, label, mask))
    if not categories:
        raise ValidationError(f"no MVTec-style categories with split {split!r} under {root}")
    level = "both" if not problems else "image_only"
    notes = f"converted from MVTec-style layout, split={split}"
    if problems:
        notes += f"; {len(problems)} masks missing, downgraded to image_only"
    return DatasetManifest(name, domain_tag, categories, samples, level, root, notes)


def convert_flat(
    images_dir: str | Path,
    masks_dir: str | Path | None = None,
    name: str = "dataset",
    category: str = "object",
    domain_tag: str = "industrial",
    annotation_level: str | None = None,
) -> DatasetManifest:
    """Flat layout.

    Labels come from subdirectory names when ``images_dir`` has subdirectories
    (``good``/``normal``/``no``/``healthy``/``ok`` are normal), otherwise from
    the mask: a non-empty ``<stem>.png`` or ``<stem>_mask.png`` in ``masks_dir``
    marks the image anomalous.
    """
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise AssetError(f"image directory not found: {images_dir}")
    masks_dir = Path(masks_dir) if masks_dir else None

    def find_mask(stem: str) -> Path | None:
        if masks_dir is None:
            return None
        for cand in (f"{stem}.png", f"{stem}_mask.png"):
            if (masks_dir / cand).exists():
                return masks_dir / cand
        return None

    samples = []
    subdirs = sorted(p for p in images_dir.iterdir() if p.is_dir())
    if subdirs:
        for d in subdirs:
            label = 0 if d.name.lower() in NORMAL_DIR_NAMES else 1
            for img in _images_in(d):
                samples.append(SampleEntry(f"{d.name}/{img.stem}", category, img, label, find_mask(img.stem)))
        rule = "labels from subdirectory names"
    else:
        for img in _images_in(images_dir):
            mask = find_mask(img.stem)
            label = 0
            if mask is not None:
                with Image.open(mask) as m:
                    label = int(np.asarray(m.convert("L")).max() > 127)
            samples.append(SampleEntry(img.stem, category, img, label, mask if label else None))
        rule = "labels from mask non-emptiness"
    if annotation_level is None:
        annotation_level = "both" if masks_dir is not None else "image_only"
    return DatasetManifest(
        name, domain_tag, [category], samples, annotation_level, images_dir.parent, f"flat layout, {rule}"
    )
