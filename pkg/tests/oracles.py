"""Independent reference implementations used as test oracles.

Nothing here imports the code under test beyond plain data types, so
agreement is evidence rather than tautology.
"""
from __future__ import annotations

import math

import numpy as np


def inside_box(px, py, box, pad=0.0):
    """Point-in-rotated-rectangle test by projecting onto the box axes."""
    cx, cy, w, h, t = box
    c, s = math.cos(t), math.sin(t)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= w / 2 + pad) & (np.abs(v) <= h / 2 + pad)


def box_extent(box):
    cx, cy, w, h, t = box
    c, s = abs(math.cos(t)), abs(math.sin(t))
    hw, hh = 0.5 * (w * c + h * s), 0.5 * (w * s + h * c)
    return cx - hw, cy - hh, cx + hw, cy + hh


def mc_iou(a, b, samples, rng) -> float:
    """Monte-Carlo IoU from uniform samples over the joint bounding rectangle."""
    ea, eb = box_extent(a), box_extent(b)
    x0, y0 = min(ea[0], eb[0]), min(ea[1], eb[1])
    x1, y1 = max(ea[2], eb[2]), max(ea[3], eb[3])
    px = rng.uniform(x0, x1, samples)
    py = rng.uniform(y0, y1, samples)
    ia = inside_box(px, py, a)
    ib = inside_box(px, py, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def brute_force_eval(dets, gts, num_classes, iou_fn, thr=0.5):
    """Naive matcher and precision-envelope AP.

    ``dets``: list of (image_id, box, cls, score); ``gts``: (image_id, box, cls).
    Returns (per-class AP list with None for absent classes, mAP).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][3], dets[i][0], i))
    taken = [False] * len(gts)
    is_tp = [False] * len(dets)
    for i in order:
        img, box, cls, _ = dets[i]
        best, best_iou = None, None
        for j, (gimg, gbox, gcls) in enumerate(gts):
            if gimg != img or gcls != cls or taken[j]:
                continue
            iou = iou_fn(box, gbox)
            if iou >= thr and (best_iou is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            taken[best] = True
            is_tp[i] = True
    aps = []
    for c in range(num_classes):
        n_gt = sum(1 for g in gts if g[2] == c)
        if n_gt == 0:
            aps.append(None)
            continue
        flags = [is_tp[i] for i in order if dets[i][2] == c]
        # (recall, precision) after each detection
        pts = []
        tp = 0
        for k, f in enumerate(flags, start=1):
            tp += f
            pts.append((tp / n_gt, tp / k))
        # area under the envelope: for each recall level reached, the best
        # precision at that recall or beyond, times the recall increment
        ap = 0.0
        prev_r = 0.0
        for r, _ in pts:
            if r > prev_r:
                ap += (r - prev_r) * max(p for rr, p in pts if rr >= r)
                prev_r = r
        aps.append(ap)
    present = [a for a in aps if a is not None]
    return aps, (sum(present) / len(present) if present else None)


def fit_mask_rectangle(mask: np.ndarray):
    """Oriented rectangle fitted to a binary pixel mask.

    The orientation comes from the second moments; the extents from the
    projections of pixel centers onto the principal axes (plus one pixel).
    Returns (cx, cy, w, h, theta) with w along ``theta``.
    """
    ys, xs = np.nonzero(mask)
    px, py = xs + 0.5, ys + 0.5
    mx, my = px.mean(), py.mean()
    cov = np.cov(np.stack([px - mx, py - my]))
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, np.argmax(evals)]
    theta = math.atan2(major[1], major[0])
    c, s = math.cos(theta), math.sin(theta)
    u = c * (px - mx) + s * (py - my)
    v = -s * (px - mx) + c * (py - my)
    cu = 0.5 * (u.max() + u.min())
    cv = 0.5 * (v.max() + v.min())
    cx, cy = mx + c * cu - s * cv, my + s * cu + c * cv
    return cx, cy, u.max() - u.min() + 1.0, v.max() - v.min() + 1.0, theta


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))
