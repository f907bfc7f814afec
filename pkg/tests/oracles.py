"""Brute-force reference implementations. Deliberately slow and independent of zsad.metrics."""

from __future__ import annotations

from collections import deque

import numpy as np


def auroc_pairs(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _confusion(scores, labels, t):
    pred = scores >= t
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, fn


def ap_thresholds(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        tp, fp, _ = _confusion(scores, labels, t)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_thresholds(scores, labels) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    best, best_t = -1.0, None
    for t in sorted(set(scores.tolist()), reverse=True):
        tp, fp, fn = _confusion(scores, labels, t)
        f1 = 2 * tp / (2 * tp + fp + fn)
        if f1 > best:
            best, best_t = f1, t
    return best, best_t


def flood_regions(mask) -> list[list[tuple[int, int]]]:
    """4-connected components by breadth-first search."""
    mask = np.asarray(mask).astype(bool)
    seen = np.zeros_like(mask)
    regions = []
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                comp, queue = [], deque([(i, j)])
                seen[i, j] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
                regions.append(comp)
    return regions


def aupro_all_thresholds(maps, masks, limit: float) -> float:
    maps = [np.asarray(m, dtype=float) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    regions = [(k, np.array(r)) for k, m in enumerate(masks) for r in flood_regions(m)]
    n_normal = sum(int((~m).sum()) for m in masks)
    thresholds = sorted(set(np.concatenate([m.ravel() for m in maps]).tolist()), reverse=True)
    fprs, pros = [0.0], [0.0]
    for t in thresholds:
        preds = [m >= t for m in maps]
        fp = sum(int((p & ~g).sum()) for p, g in zip(preds, masks))
        overlaps = [preds[k][r[:, 0], r[:, 1]].mean() for k, r in regions]
        fprs.append(fp / n_normal)
        pros.append(float(np.mean(overlaps)))
    area = 0.0
    for i in range(1, len(fprs)):
        x0, x1, y0, y1 = fprs[i - 1], fprs[i], pros[i - 1], pros[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


def focal_loop(p_n, p_a, target, gamma, alpha, clamp=1e-7) -> float:
    total, count = 0.0, 0
    for idx in np.ndindex(target.shape):
        anomalous = target[idx] > 0.5
        p_t = max(float(p_a[idx] if anomalous else p_n[idx]), clamp)
        a_t = alpha if anomalous else 1 - alpha
        total += -a_t * (1 - p_t) ** gamma * np.log(p_t)
        count += 1
    return total / count


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def random_rect_mask(rng, h, w, max_regions=3, min_side=1, max_side=None):
    max_side = max_side or max(2, min(h, w) // 2)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, max_regions + 1))):
        rh, rw = rng.integers(min_side, max_side + 1, size=2)
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        mask[y0 : y0 + rh, x0 : x0 + rw] = True
    return mask
