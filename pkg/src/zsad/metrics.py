"""Image- and pixel-level evaluation metrics.

Undefined metrics (a single class present, no anomalous region) come back as
NaN; :func:`aggregate_report` turns them into explicit flags.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ParameterError

IMAGE_METRICS = ("auroc", "ap", "f1max")
PIXEL_METRICS = ("auroc", "aupro", "f1max")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    kind: str = "image"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ParameterError(f"{self.scores.size} scores for {self.labels.size} labels")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _as_set(scores, labels) -> ScoredSet:
    return scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)


def auroc(scores, labels=None) -> float:
    """Mann-Whitney statistic; tied pairs count one half."""
    s = _as_set(scores, labels)
    p, n = s.n_pos, s.n_neg
    if p == 0 or n == 0:
        return math.nan
    ranks = rankdata(s.scores, method="average")
    u = ranks[s.labels].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def _descending_groups(s: ScoredSet):
    """Cumulative (tp, fp) at the end of each tie group, thresholds descending."""
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    return scores[ends], tp[ends], fp[ends]


def average_precision(scores, labels=None) -> float:
    """Step-wise AP over descending-score prefixes, tie groups taken whole."""
    s = _as_set(scores, labels)
    if s.n_pos == 0:
        return math.nan
    _, tp, fp = _descending_groups(s)
    recall = tp / s.n_pos
    precision = tp / (tp + fp)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def f1_max(scores, labels=None) -> tuple[float, float]:
    """Best F1 over thresholds at each unique score, predicting ``score >= t``.

    Equal F1 values resolve to the larger threshold.
    """
    s = _as_set(scores, labels)
    if s.n_pos == 0:
        return math.nan, math.nan
    thresholds, tp, fp = _descending_groups(s)
    f1 = 2 * tp / (tp + fp + s.n_pos)
    best = int(np.argmax(f1))  # first hit is the largest threshold
    return float(f1[best]), float(thresholds[best])


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def label_regions(mask: np.ndarray, connectivity: int = 4) -> tuple[np.ndarray, int]:
    if connectivity not in _STRUCTURES:
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity}")
    labeled, n = ndimage.label(np.asarray(mask).astype(bool), structure=_STRUCTURES[connectivity])
    return labeled, int(n)


def pro_curve(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    connectivity: int = 4,
    max_exact: int = 100_000,
    num_thresholds: int = 200,
) -> tuple[np.ndarray, np.ndarray] | None:
    """(fpr, pro) points for a descending threshold sweep, starting at (0, 0).

    Overlap is averaged over every region of every image; FPR pools the normal
    pixels of all images. Returns None when there is no region or no normal pixel.
    """
    if len(maps) != len(masks):
        raise ParameterError(f"{len(maps)} maps for {len(masks)} masks")
    scores, weights, normal = [], [], []
    n_regions = 0
    per_image = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(getattr(amap, "values", amap), dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ParameterError(f"map shape {amap.shape} does not match mask shape {mask.shape}")
        labeled, n = label_regions(mask, connectivity)
        per_image.append((amap.ravel(), labeled.ravel(), n))
        n_regions += n
    if n_regions == 0:
        return None
    for flat, labeled, n in per_image:
        sizes = np.bincount(labeled, minlength=n + 1).astype(np.float64)
        w = np.zeros_like(flat)
        inside = labeled > 0
        w[inside] = 1.0 / (sizes[labeled[inside]] * n_regions)
        scores.append(flat)
        weights.append(w)
        normal.append(~inside)
    scores = np.concatenate(scores)
    weights = np.concatenate(weights)
    normal = np.concatenate(normal)
    n_normal = int(normal.sum())
    if n_normal == 0:
        return None

    order = np.argsort(-scores, kind="stable")
    desc = scores[order]
    cum_pro = np.cumsum(weights[order])
    cum_fp = np.cumsum(normal[order])
    if scores.size <= max_exact:
        idx = np.flatnonzero(np.r_[desc[1:] != desc[:-1], True])
    else:
        thresholds = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, num_thresholds)))[::-1]
        asc = desc[::-1]
        counts = scores.size - np.searchsorted(asc, thresholds, side="left")
        idx = counts - 1
    fpr = np.r_[0.0, cum_fp[idx] / n_normal]
    pro = np.r_[0.0, np.minimum(cum_pro[idx], 1.0)]
    return fpr, pro


def partial_area(fpr: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under a monotone curve up to ``limit``, divided by ``limit``."""
    keep = fpr <= limit
    x, v = fpr[keep], y[keep]
    if x[-1] < limit:
        nxt = np.flatnonzero(~keep)
        if nxt.size:
            j = nxt[0]
            x0, x1, y0, y1 = fpr[j - 1], fpr[j], y[j - 1], y[j]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        else:
            y_lim = v[-1]
        x, v = np.r_[x, limit], np.r_[v, y_lim]
    area = np.sum((x[1:] - x[:-1]) * (v[1:] + v[:-1]) / 2.0)
    return float(area / limit)


def aupro(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    connectivity: int = 4,
    max_exact: int = 100_000,
    num_thresholds: int = 200,
) -> float:
    if not 0 < fpr_limit <= 1:
        raise ParameterError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    curve = pro_curve(maps, masks, connectivity, max_exact, num_thresholds)
    if curve is None:
        return math.nan
    return partial_area(*curve, fpr_limit)


@dataclass
class CategoryInputs:
    """Per-category evaluation inputs. Either block may be None when not annotated."""

    image_scores: Sequence[float] | None = None
    image_labels: Sequence[int] | None = None
    maps: Sequence[np.ndarray] | None = None
    masks: Sequence[np.ndarray] | None = None


def _clean(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def image_metrics(scores, labels) -> dict[str, float | None]:
    s = ScoredSet(scores, labels, "image")
    return {
        "auroc": _clean(auroc(s)),
        "ap": _clean(average_precision(s)),
        "f1max": _clean(f1_max(s)[0]),
    }


def pixel_metrics(maps, masks, fpr_limit: float = 0.3, connectivity: int = 4) -> dict[str, float | None]:
    vals = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    gts = [np.asarray(m).astype(bool) for m in masks]
    s = ScoredSet(
        np.concatenate([v.ravel() for v in vals]) if vals else np.zeros(0),
        np.concatenate([g.ravel() for g in gts]) if gts else np.zeros(0),
        "pixel",
    )
    return {
        "auroc": _clean(auroc(s)),
        "aupro": _clean(aupro(vals, gts, fpr_limit, connectivity)) if vals else None,
        "f1max": _clean(f1_max(s)[0]),
    }


@dataclass
class EvalReport:
    per_category: dict[str, dict[str, Any]]
    dataset_mean: dict[str, dict[str, float | None] | None]
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_category": self.per_category,
            "dataset_mean": self.dataset_mean,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        def fmt(block, names):
            if not block:
                return "-"
            return "(" + ", ".join("n/a" if block.get(k) is None else f"{100 * block[k]:.1f}" for k in names) + ")"

        rows = [("category", "image (AUROC, AP, F1-max)", "pixel (AUROC, AUPRO, F1-max)")]
        for cat in sorted(self.per_category):
            entry = self.per_category[cat]
            rows.append((cat, fmt(entry.get("image"), IMAGE_METRICS), fmt(entry.get("pixel"), PIXEL_METRICS)))
        rows.append(
            ("mean", fmt(self.dataset_mean.get("image"), IMAGE_METRICS), fmt(self.dataset_mean.get("pixel"), PIXEL_METRICS))
        )
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def _mean_block(blocks: Iterable[dict | None], names) -> dict[str, float | None] | None:
    blocks = [b for b in blocks if b]
    if not blocks:
        return None
    out = {}
    for k in names:
        vals = [b[k] for b in blocks if b.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def aggregate_report(
    per_category_inputs: Mapping[str, CategoryInputs],
    fpr_limit: float = 0.3,
    connectivity: int = 4,
    metadata: dict[str, Any] | None = None,
) -> EvalReport:
    per_category: dict[str, dict[str, Any]] = {}
    for cat in sorted(per_category_inputs):
        inp = per_category_inputs[cat]
        entry: dict[str, Any] = {"counts": {}, "undefined": []}
        if inp.image_scores is not None:
            labels = np.asarray(inp.image_labels).astype(int)
            entry["image"] = image_metrics(inp.image_scores, labels)
            entry["counts"].update(images=int(labels.size), anomalous_images=int(labels.sum()))
            entry["undefined"] += [f"image.{k}" for k, v in entry["image"].items() if v is None]
        if inp.maps is not None:
            n_pos = int(sum(np.asarray(m).astype(bool).sum() for m in inp.masks))
            entry["counts"].update(pixel_maps=len(inp.maps), anomalous_pixels=n_pos)
            if n_pos == 0:
                entry["pixel"] = None
                entry["undefined"].append("pixel")
            else:
                entry["pixel"] = pixel_metrics(inp.maps, inp.masks, fpr_limit, connectivity)
                entry["undefined"] += [f"pixel.{k}" for k, v in entry["pixel"].items() if v is None]
        per_category[cat] = entry
    dataset_mean = {
        "image": _mean_block((e.get("image") for e in per_category.values()), IMAGE_METRICS),
        "pixel": _mean_block((e.get("pixel") for e in per_category.values()), PIXEL_METRICS),
    }
    meta = {"fpr_limit": fpr_limit, "connectivity": connectivity, "pixel_pooling": "per-category"}
    meta.update(metadata or {})
    return EvalReport(per_category, dataset_mean, meta)
