"""Rotated bounding boxes: conversions, exact IoU by convex clipping, NMS.

Boxes are stored by center: ``(cx, cy, w, h, theta)`` where ``theta`` is the
counterclockwise rotation (radians) of the box x-axis from the image x-axis.
A box given by its upper-left corner ``(x0, y0)`` before rotation converts as
``cx = x0 + w / 2``, ``cy = y0 + h / 2`` (see :meth:`OrientedBox.from_upper_left`).

Canonical form is the long-edge convention: ``w >= h`` and
``theta in [-pi/2, pi/2)``. Orientation is pi-periodic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

EPS_COLLINEAR = 1e-9
EPS_AREA = 1e-12
MIN_SIDE = 1e-6
HALF_PI = math.pi / 2


class InvalidBoxError(ValueError):
    """Raised for non-finite or degenerate box parameters."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle into ``[-pi/2, pi/2)`` with period pi.

    Angles already in range are returned untouched so that wrapping is
    exactly idempotent.
    """
    if -HALF_PI <= theta < HALF_PI:
        return theta
    r = math.fmod(theta + HALF_PI, math.pi)
    if r < 0:
        r += math.pi
    out = r - HALF_PI
    if out >= HALF_PI:
        out -= math.pi
    if out < -HALF_PI:
        out = -HALF_PI
    return out


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box field in {vals}")
        if self.w <= MIN_SIDE or self.h <= MIN_SIDE:
            raise InvalidBoxError(f"degenerate box: w={self.w}, h={self.h}")

    @classmethod
    def from_upper_left(cls, x0, y0, w, h, theta=0.0) -> "OrientedBox":
        """Build from the upper-left corner of the unrotated rectangle.

        The rectangle is rotated about its own center.
        """
        return cls(x0 + w / 2.0, y0 + h / 2.0, w, h, theta)

    def as_tuple(self) -> tuple:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    @property
    def area(self) -> float:
        return self.w * self.h

    def canonical(self) -> "OrientedBox":
        return canonicalize(self)

    def hull(self) -> "HorizontalBox":
        """Axis-aligned bounding rectangle."""
        c, s = abs(math.cos(self.theta)), abs(math.sin(self.theta))
        hw = 0.5 * (self.w * c + self.h * s)
        hh = 0.5 * (self.w * s + self.h * c)
        return HorizontalBox(self.cx - hw, self.cy - hh, 2 * hw, 2 * hh)


@dataclass(frozen=True)
class HorizontalBox:
    """Axis-aligned box by its min corner and size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box field in {vals}")
        if self.w <= MIN_SIDE or self.h <= MIN_SIDE:
            raise InvalidBoxError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_oriented(self) -> OrientedBox:
        cx, cy = self.center
        return OrientedBox(cx, cy, self.w, self.h, 0.0)


BoxLike = Union[OrientedBox, HorizontalBox]


def canonicalize(b: OrientedBox) -> OrientedBox:
    """Return the long-edge form of ``b`` (same point set)."""
    w, h, t = b.w, b.h, b.theta
    if w < h:
        w, h, t = h, w, t + HALF_PI
    t = wrap_angle(t)
    if (w, h, t) == (b.w, b.h, b.theta):
        return b
    return OrientedBox(b.cx, b.cy, w, h, t)


def to_corners(b: OrientedBox) -> np.ndarray:
    """Corners of ``b`` as a (4, 2) array in counterclockwise order.

    Counterclockwise is with respect to a y-up frame (positive shoelace area).
    The first corner is the one at local coordinates ``(-w/2, -h/2)``.
    """
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.w / 2.0, b.h / 2.0
    local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    return np.array([(b.cx + c * u - s * v, b.cy + s * u + c * v) for u, v in local])


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counterclockwise order)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _line_intersection(p1, p2, q1, q2):
    dpx, dpy = p2[0] - p1[0], p2[1] - p1[1]
    dqx, dqy = q2[0] - q1[0], q2[1] - q1[1]
    denom = dpx * dqy - dpy * dqx
    if abs(denom) < 1e-300:
        return p2
    t = ((q1[0] - p1[0]) * dqy - (q1[1] - p1[1]) * dqx) / denom
    return (p1[0] + t * dpx, p1[1] + t * dpy)


def clip_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``.

    Returns the intersection polygon as a CCW vertex list, possibly empty.
    Consecutive vertices closer than the collinearity tolerance are merged.
    """
    output = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clip]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        scale = max(1.0, math.hypot(b[0] - a[0], b[1] - a[1]))
        tol = EPS_COLLINEAR * scale
        inp, output = output, []
        if not inp:
            break
        s = inp[-1]
        s_in = _cross(a, b, s) >= -tol
        for e in inp:
            e_in = _cross(a, b, e) >= -tol
            if e_in:
                if not s_in:
                    output.append(_line_intersection(s, e, a, b))
                output.append(e)
            elif s_in:
                output.append(_line_intersection(s, e, a, b))
            s, s_in = e, e_in
    return _dedupe(output)


def _dedupe(poly):
    out = []
    for p in poly:
        if out and abs(p[0] - out[-1][0]) <= EPS_COLLINEAR and abs(p[1] - out[-1][1]) <= EPS_COLLINEAR:
            continue
        out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= EPS_COLLINEAR and abs(out[0][1] - out[-1][1]) <= EPS_COLLINEAR:
        out.pop()
    return out


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    poly = clip_convex(to_corners(a), to_corners(b))
    if len(poly) < 3:
        return 0.0
    area = polygon_area(poly)
    return area if area > EPS_AREA else 0.0


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two oriented boxes."""
    # Quick reject on circumscribed circles.
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = intersection_area(a, b)
    # Area sums are formed in a fixed order so iou(a, b) == iou(b, a).
    lo, hi = sorted((a.area, b.area))
    union = lo + hi - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def hbox_iou(a: HorizontalBox, b: HorizontalBox) -> float:
    """Closed-form IoU of two axis-aligned boxes."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def hbox_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for arrays of ``(x1, y1, x2, y2)`` rows."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def max_iou(roi: BoxLike, gts: Sequence[OrientedBox]) -> float:
    """Largest IoU of ``roi`` against any ground-truth box.

    A horizontal ``roi`` is compared against the axis-aligned hulls of the
    ground truths.
    """
    if isinstance(roi, HorizontalBox):
        return max((hbox_iou(roi, g.hull()) for g in gts), default=0.0)
    return max((rotated_iou(roi, g) for g in gts), default=0.0)


def gate_sigma(roi: BoxLike, gts: Sequence[OrientedBox], threshold: float = 0.5) -> int:
    """Binary foreground gate: 1 iff the best IoU with a gt reaches ``threshold``."""
    if len(gts) == 0:
        logger.debug("gate_sigma called with no ground truth; gate is 0")
        return 0
    return int(max_iou(roi, gts) >= threshold)


def rotated_nms(boxes: Sequence[OrientedBox], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy rotated NMS; returns kept indices in descending-score order.

    Equal scores are visited in increasing original index. A box is dropped
    when its IoU with an already kept box exceeds ``iou_threshold``.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"boxes ({len(boxes)}) and scores ({len(scores)}) differ in length")
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    keep: list[int] = []
    for i in order:
        if all(rotated_iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def angle_delta(pred: float, gt: float) -> float:
    """Unsigned orientation difference in ``[0, pi/2]`` under period pi."""
    if not (math.isfinite(pred) and math.isfinite(gt)):
        raise InvalidBoxError("non-finite angle")
    d = math.fmod(abs(pred - gt), math.pi)
    return min(d, math.pi - d)


def signed_angle_residual(target: float, ref: float) -> float:
    """``target - ref`` wrapped into ``[-pi/2, pi/2)``."""
    return wrap_angle(target - ref)


def closest_representation(gt: OrientedBox, ref_theta: float) -> tuple[float, float, float]:
    """Choose between ``(w, h, theta)`` and ``(h, w, theta + pi/2)`` for ``gt``.

    Returns ``(w, h, residual)`` where ``residual`` is the wrapped angle from
    ``ref_theta`` to the chosen representation, picking the smaller residual.
    Regression targets use this to stay continuous for near-square boxes.
    """
    r0 = signed_angle_residual(gt.theta, ref_theta)
    r1 = signed_angle_residual(gt.theta + HALF_PI, ref_theta)
    if abs(r0) <= abs(r1):
        return gt.w, gt.h, r0
    return gt.h, gt.w, r1
