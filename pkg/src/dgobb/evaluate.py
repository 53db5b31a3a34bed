"""Detection metrics: greedy IoU matching, all-point AP, mAP and angle RMSD."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import OrientedBox, angle_delta, rotated_iou


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: OrientedBox
    cls: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: OrientedBox
    cls: int


@dataclass
class MatchResult:
    order: list          # detection indices in processing order
    tp: np.ndarray       # bool per detection, input order
    matched_gt: np.ndarray  # gt index per detection, -1 when unmatched


@dataclass
class EvalReport:
    ap: list                 # per class, None where the class has no ground truth
    mAP: float | None
    angle_rmsd: float | None
    tp: list = field(default_factory=list)
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)
    iou_threshold: float = 0.5

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def csv_header(self) -> str:
        k = len(self.ap)
        return ",".join(["mAP", "angle_rmsd"] + [f"ap_{i}" for i in range(k)])

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return ",".join([fmt(self.mAP), fmt(self.angle_rmsd)] + [fmt(a) for a in self.ap])


def detection_order(dets: Sequence[Detection]) -> list[int]:
    """Descending score; ties by lower image id, then lower input index."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> MatchResult:
    """Greedy matching; each detection takes the best unmatched same-class gt."""
    by_image: dict = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=int)
    order = detection_order(dets)
    for di in order:
        d = dets[di]
        best, best_iou = -1, iou_thr
        for gi in by_image.get(d.image_id, ()):
            g = gts[gi]
            if used[gi] or g.cls != d.cls:
                continue
            iou = rotated_iou(d.box, g.box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        if best >= 0:
            used[best] = True
            tp[di] = True
            matched[di] = best
    return MatchResult(order, tp, matched)


def average_precision(flags: Sequence[bool], num_gt: int) -> float | None:
    """All-point AP from TP flags in descending-score order.

    Returns None when ``num_gt`` is 0 (AP undefined).
    """
    if num_gt <= 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tps = np.cumsum(flags)
    fps = np.cumsum(~flags)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def angle_rmsd(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5,
               match: MatchResult | None = None) -> float | None:
    """RMS of pi-periodic angle errors over matched pairs; None if nothing matched."""
    match = match or match_detections(dets, gts, iou_thr)
    deltas = [angle_delta(dets[di].box.theta, gts[gi].box.theta)
              for di, gi in enumerate(match.matched_gt) if gi >= 0]
    if not deltas:
        return None
    return math.sqrt(math.fsum(d * d for d in deltas) / len(deltas))


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int,
             iou_thr: float = 0.5) -> EvalReport:
    match = match_detections(dets, gts, iou_thr)
    aps, tps, fps, fns = [], [], [], []
    for c in range(num_classes):
        num_gt = sum(1 for g in gts if g.cls == c)
        flags = [bool(match.tp[i]) for i in match.order if dets[i].cls == c]
        aps.append(average_precision(flags, num_gt))
        tp = sum(flags)
        tps.append(tp)
        fps.append(len(flags) - tp)
        fns.append(num_gt - tp)
    present = [a for a in aps if a is not None]
    m = float(np.mean(present)) if present else None
    return EvalReport(aps, m, angle_rmsd(dets, gts, iou_thr, match), tps, fps, fns, iou_thr)
