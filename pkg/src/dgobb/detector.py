"""A miniature two-stage oriented detector with a style-hallucinated branch.

Pipeline: 4-block conv backbone -> single-level fused pyramid (stride 4) ->
RPN over square anchors -> horizontal RoI pooling -> RRoI learner ->
rotated RoI pooling -> classification / box refinement heads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .geometry import (HorizontalBox, OrientedBox, canonicalize, closest_representation,
                       hbox_iou_matrix, rotated_nms)
from .style import STD_EPS

BLOCK_STRIDES = (1, 2, 2, 1)  # per conv; cumulative 1, 2, 4, 4
PYRAMID_STRIDE = 4
BBOX_CLAMP = math.log(1000.0 / 16)
PRE_NMS_TOP = 200
DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2, 0.1])  # head regression targets are divided by these


@dataclass
class DetectorConfig:
    image_size: int = 64
    widths: tuple = (8, 16, 32, 32)
    pyramid_width: int = 32
    pool_size: int = 4
    embed_dim: int = 128
    hidden: int = 128
    num_classes: int = 3
    num_proposals: int = 16
    temperature: float = 0.1
    anchor_sizes: tuple = (10.0, 16.0, 26.0)
    style: bool = True
    hcl: bool = True
    rac: bool = True
    sec: bool = True
    style_blocks: tuple = (1, 2, 3, 4)
    sec_metric: str = "jsd"
    rpn_nms: float = 0.7
    nms_threshold: float = 0.5
    score_threshold: float = 0.05
    gate_threshold: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.anchor_sizes = tuple(float(a) for a in self.anchor_sizes)
        self.style_blocks = tuple(sorted(int(b) for b in self.style_blocks))
        self.validate()

    def validate(self) -> None:
        if self.num_proposals < 2:
            raise ValueError("num_proposals must be at least 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be at least 8")
        if len(self.widths) != 4:
            raise ValueError("exactly four backbone widths are required")
        if self.image_size % PYRAMID_STRIDE:
            raise ValueError(f"image_size must be a multiple of {PYRAMID_STRIDE}")
        if any(b not in (1, 2, 3, 4) for b in self.style_blocks):
            raise ValueError(f"style_blocks must be drawn from 1..4, got {self.style_blocks}")
        if self.sec_metric not in ("l2", "kl", "jsd"):
            raise ValueError(f"unknown sec_metric {self.sec_metric!r}")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes)

    @property
    def pyramid_size(self) -> int:
        return self.image_size // PYRAMID_STRIDE

    @property
    def pooled_dim(self) -> int:
        return self.pyramid_width * self.pool_size ** 2

    def toggles(self) -> dict:
        return {"style": self.style, "hcl": self.hcl, "rac": self.rac, "sec": self.sec}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Proposal:
    hbox: HorizontalBox
    objectness: float
    source_anchor: int


# parameter helpers ---------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def add_linear(params: ParamStore, name: str, n_in: int, n_out: int, rng, std: float | None = None):
    w = rng.normal(0.0, std, (n_in, n_out)) if std is not None else _he(rng, (n_in, n_out), n_in)
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.zeros(n_out))


def linear(params: ParamStore, name: str, x) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def mlp2(params: ParamStore, name: str, x) -> Tensor:
    return linear(params, f"{name}.fc2", ad.relu(linear(params, f"{name}.fc1", x)))


class Backbone:
    """Four 3x3 conv + ReLU blocks at cumulative strides 1, 2, 4, 4."""

    def __init__(self, params: ParamStore, widths: Sequence[int], rng, prefix: str = "backbone"):
        self.params = params
        self.prefix = prefix
        cin = 3
        for i, cout in enumerate(widths):
            params.add(f"{prefix}.conv{i + 1}.w", _he(rng, (cout, cin, 3, 3), cin * 9))
            params.add(f"{prefix}.conv{i + 1}.b", np.zeros(cout))
            cin = cout

    @classmethod
    def frozen(cls, widths: Sequence[int], seed: int) -> "Backbone":
        store = ParamStore()
        enc = cls(store, widths, np.random.default_rng(seed), prefix="encoder")
        for _, p in store.items():
            p.requires_grad = False
        return enc

    def snapshot(self) -> "Backbone":
        """A frozen copy of the current weights, unaffected by later training."""
        store = ParamStore()
        enc = Backbone.__new__(Backbone)
        enc.params, enc.prefix = store, "encoder"
        for name, p in self.params.items():
            if name.startswith(self.prefix + "."):
                store.add("encoder" + name[len(self.prefix):], p.data).requires_grad = False
        return enc

    def forward(self, images) -> list[Tensor]:
        """``images`` is (B, H, W, 3); returns four (B, C_i, H_i, W_i) maps."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected images of shape (B, H, W, 3), got {x.shape}")
        h = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        out = []
        for i, s in enumerate(BLOCK_STRIDES):
            p = self.prefix
            h = ad.relu(ad.conv2d(h, self.params[f"{p}.conv{i + 1}.w"], self.params[f"{p}.conv{i + 1}.b"], stride=s))
            out.append(h)
        return out


# anchors and box coding -------------------------------------------------------------------

def make_anchors(cfg: DetectorConfig) -> np.ndarray:
    """(N, 4) xyxy anchors ordered by (row, col, size)."""
    g = cfg.pyramid_size
    cy, cx = np.mgrid[0:g, 0:g]
    cx = (cx.reshape(-1) + 0.5) * PYRAMID_STRIDE
    cy = (cy.reshape(-1) + 0.5) * PYRAMID_STRIDE
    sizes = np.asarray(cfg.anchor_sizes)
    cx = np.repeat(cx, len(sizes))
    cy = np.repeat(cy, len(sizes))
    s = np.tile(sizes, g * g)
    return np.stack([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2], axis=1)


def encode_hdeltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    tw, th = targets[:, 2] - targets[:, 0], targets[:, 3] - targets[:, 1]
    tx, ty = targets[:, 0] + tw / 2, targets[:, 1] + th / 2
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_hdeltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + aw / 2, anchors[:, 1] + ah / 2
    x = ax + deltas[:, 0] * aw
    y = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -BBOX_CLAMP, BBOX_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -BBOX_CLAMP, BBOX_CLAMP))
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=1)


def hbox_nms(boxes: np.ndarray, scores: np.ndarray, thr: float, max_keep: int | None = None) -> list[int]:
    """Greedy axis-aligned NMS; ties in score go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    ious = hbox_iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        keep.append(int(order[pos]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= ious[pos] > thr
    return keep


def xyxy_to_hbox(b) -> HorizontalBox:
    return HorizontalBox(float(b[0]), float(b[1]), float(b[2] - b[0]), float(b[3] - b[1]))


def hbox_to_xyxy(h: HorizontalBox) -> np.ndarray:
    return np.array([h.x, h.y, h.x2, h.y2])


# RRoI coding -------------------------------------------------------------------------------

def theta_from_logit(t):
    """Squash a raw output into ``[-pi/2, pi/2)``."""
    return math.pi * (t - 0.5)


def decode_rroi(p: Proposal, out: np.ndarray) -> OrientedBox:
    """Oriented box from learner outputs ``(dx, dy, dw, dh, t)`` with ``t`` already a sigmoid."""
    hb = p.hbox
    hx, hy = hb.center
    dw = float(np.clip(out[2], -BBOX_CLAMP, BBOX_CLAMP))
    dh = float(np.clip(out[3], -BBOX_CLAMP, BBOX_CLAMP))
    theta = theta_from_logit(float(out[4]))
    theta = min(theta, math.pi / 2 - 1e-12)
    return OrientedBox(hx + float(out[0]) * hb.w, hy + float(out[1]) * hb.h, hb.w * math.exp(dw),
                       hb.h * math.exp(dh), theta)


def rroi_targets(p: Proposal, gt: OrientedBox, pred_theta: float) -> np.ndarray:
    """Learner targets ``(dx, dy, dw, dh, theta)`` for proposal ``p``.

    The gt representation closest in angle to ``pred_theta`` is used; the
    angle target is ``pred_theta`` plus the wrapped residual.
    """
    hb = p.hbox
    hx, hy = hb.center
    w, h, res = closest_representation(gt, pred_theta)
    return np.array([(gt.cx - hx) / hb.w, (gt.cy - hy) / hb.h, math.log(w / hb.w), math.log(h / hb.h),
                     pred_theta + res])


def encode_obb(r: OrientedBox, gt: OrientedBox) -> np.ndarray:
    """Refinement deltas of ``gt`` in the frame of ``r``."""
    c, s = math.cos(r.theta), math.sin(r.theta)
    dx, dy = gt.cx - r.cx, gt.cy - r.cy
    w, h, res = closest_representation(gt, r.theta)
    return np.array([(c * dx + s * dy) / r.w, (-s * dx + c * dy) / r.h, math.log(w / r.w), math.log(h / r.h), res])


def decode_obb(r: OrientedBox, d: np.ndarray) -> OrientedBox:
    c, s = math.cos(r.theta), math.sin(r.theta)
    u, v = d[0] * r.w, d[1] * r.h
    dw = float(np.clip(d[2], -BBOX_CLAMP, BBOX_CLAMP))
    dh = float(np.clip(d[3], -BBOX_CLAMP, BBOX_CLAMP))
    return canonicalize(OrientedBox(r.cx + c * u - s * v, r.cy + s * u + c * v, r.w * math.exp(dw),
                                    r.h * math.exp(dh), r.theta + float(d[4])))


# pooling ------------------------------------------------------------------------------------

def hroi_points(hbox: HorizontalBox, size: int) -> np.ndarray:
    """Regular ``size x size`` grid inside ``hbox`` in image units, row-major."""
    t = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(hbox.y + t * hbox.h, hbox.x + t * hbox.w, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def rroi_points(r: OrientedBox, size: int) -> np.ndarray:
    """Grid aligned with ``r``'s axes (u along width), row-major in (v, u)."""
    t = (np.arange(size) + 0.5) / size - 0.5
    vv, uu = np.meshgrid(t * r.h, t * r.w, indexing="ij")
    c, s = math.cos(r.theta), math.sin(r.theta)
    x = r.cx + c * uu - s * vv
    y = r.cy + s * uu + c * vv
    return np.stack([x.reshape(-1), y.reshape(-1)], axis=1)


def sampling_matrix(points_per_roi: Sequence[np.ndarray], map_size: int, stride: float) -> np.ndarray:
    """(H*W, R*P) bilinear weights for all RoI grids of one image."""
    pts = np.concatenate(points_per_roi, axis=0) / stride
    return ad.bilinear_matrix(pts, map_size, map_size).T


def pool_rois(fmap: Tensor, mats: np.ndarray, n_rois: int, cfg: DetectorConfig) -> Tensor:
    """Pool (B, C, H, W) with per-image matrices (B, H*W, R*P) into (B*R, C*P)."""
    B, C, H, W = fmap.shape
    P = cfg.pool_size ** 2
    flat = ad.reshape(fmap, (B, C, H * W))
    pooled = ad.matmul(flat, Tensor(mats))  # (B, C, R*P)
    pooled = ad.reshape(pooled, (B, C, n_rois, P))
    pooled = ad.transpose(pooled, (0, 2, 1, 3))
    return ad.reshape(pooled, (B * n_rois, C * P))


def hroi_pool(fused: Tensor, proposal: Proposal, cfg: DetectorConfig) -> Tensor:
    """Pool one horizontal RoI from a (C, H, W) map into (C, S, S)."""
    C, H, W = fused.shape
    M = sampling_matrix([hroi_points(proposal.hbox, cfg.pool_size)], H, PYRAMID_STRIDE)
    out = ad.matmul(ad.reshape(fused, (C, H * W)), Tensor(M))
    return ad.reshape(out, (C, cfg.pool_size, cfg.pool_size))


def rroi_align(fused: Tensor, r: OrientedBox, cfg: DetectorConfig) -> Tensor:
    """Pool one rotated RoI from a (C, H, W) map into (C, S, S)."""
    C, H, W = fused.shape
    M = sampling_matrix([rroi_points(r, cfg.pool_size)], H, PYRAMID_STRIDE)
    out = ad.matmul(ad.reshape(fused, (C, H * W)), Tensor(M))
    return ad.reshape(out, (C, cfg.pool_size, cfg.pool_size))


# the model ----------------------------------------------------------------------------------

class Detector:
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        p = self.params
        self.backbone = Backbone(p, cfg.widths, rng)
        P = cfg.pyramid_width
        for i, c in enumerate(cfg.widths):
            p.add(f"fpn.lat{i + 1}.w", _he(rng, (P, c), c))
        A = cfg.num_anchors
        p.add("rpn.conv.w", _he(rng, (P, P, 3, 3), P * 9))
        p.add("rpn.conv.b", np.zeros(P))
        p.add("rpn.obj.w", rng.normal(0.0, 0.01, (A, P, 1, 1)))
        p.add("rpn.obj.b", np.full(A, -math.log(99.0)))
        p.add("rpn.delta.w", rng.normal(0.0, 0.01, (4 * A, P, 1, 1)))
        p.add("rpn.delta.b", np.zeros(4 * A))
        D, Hd, K = cfg.pooled_dim, cfg.hidden, cfg.num_classes
        add_linear(p, "rroi.fc1", D, Hd, rng)
        add_linear(p, "rroi.out", Hd, 5, rng, std=0.001)
        add_linear(p, "head.fc1", D, Hd, rng)
        add_linear(p, "head.fc2", Hd, Hd, rng)
        add_linear(p, "head.cls", Hd, K + 1, rng, std=0.01)
        add_linear(p, "head.reg", Hd, 5, rng, std=0.001)
        for name in ("f1", "f2", "f3", "f4"):
            add_linear(p, f"{name}.fc1", D, Hd, rng)
            add_linear(p, f"{name}.fc2", Hd, cfg.embed_dim, rng)
        for name in ("g1", "g2"):
            add_linear(p, f"{name}.fc1", D, Hd, rng)
            add_linear(p, f"{name}.fc2", Hd, K + 1, rng, std=0.01)
        self.anchors = make_anchors(cfg)

    # stages
    def backbone_forward(self, images) -> list[Tensor]:
        images = np.asarray(images, dtype=np.float64)
        s = self.cfg.image_size
        if images.shape[1:] != (s, s, 3):
            raise ValueError(f"expected images of shape (B, {s}, {s}, 3), got {images.shape}")
        return self.backbone.forward(images)

    def fpn_fuse(self, blocks: Sequence[Tensor]) -> Tensor:
        """1x1 lateral projections, average-pooled to stride 4, summed."""
        if len(blocks) != 4:
            raise ValueError("fpn_fuse needs exactly four blocks")
        g = self.cfg.pyramid_size
        fused = None
        for i, b in enumerate(blocks):
            B, C, H, W = b.shape
            x = ad.avg_pool(b, H // g)
            x = ad.matmul(self.params[f"fpn.lat{i + 1}.w"], ad.reshape(x, (B, C, g * g)))
            fused = x if fused is None else ad.add(fused, x)
        return ad.reshape(fused, (fused.shape[0], self.cfg.pyramid_width, g, g))

    def rpn_head(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits (B, N) and deltas (B, N, 4) in anchor order."""
        p = self.params
        B = fused.shape[0]
        A = self.cfg.num_anchors
        h = ad.relu(ad.conv2d(fused, p["rpn.conv.w"], p["rpn.conv.b"]))
        obj = ad.conv2d(h, p["rpn.obj.w"], p["rpn.obj.b"], pad=0)  # (B, A, g, g)
        dl = ad.conv2d(h, p["rpn.delta.w"], p["rpn.delta.b"], pad=0)  # (B, 4A, g, g)
        obj = ad.reshape(ad.transpose(obj, (0, 2, 3, 1)), (B, -1))
        g = self.cfg.pyramid_size
        dl = ad.reshape(dl, (B, A, 4, g, g))
        dl = ad.reshape(ad.transpose(dl, (0, 3, 4, 1, 2)), (B, -1, 4))
        return obj, dl

    def propose(self, obj: np.ndarray, deltas: np.ndarray, n: int | None = None) -> list[Proposal]:
        """Top-``n`` proposals of one image after axis-aligned NMS."""
        cfg = self.cfg
        n = cfg.num_proposals if n is None else n
        boxes = decode_hdeltas(self.anchors, deltas)
        boxes = np.clip(boxes, 0.0, float(cfg.image_size))
        valid = ((boxes[:, 2] - boxes[:, 0]) > 2.0) & ((boxes[:, 3] - boxes[:, 1]) > 2.0)
        scores = 1.0 / (1.0 + np.exp(-obj))
        idx = np.nonzero(valid)[0]
        idx = idx[np.lexsort((idx, -scores[idx]))][:PRE_NMS_TOP]
        keep = [int(idx[k]) for k in hbox_nms(boxes[idx], scores[idx], cfg.rpn_nms, n)]
        if len(keep) < n:
            chosen = set(keep)
            rest = sorted((i for i in idx if i not in chosen), key=lambda i: (-scores[i], i))
            keep += [int(i) for i in rest[: n - len(keep)]]
        out = [Proposal(xyxy_to_hbox(boxes[i]), float(scores[i]), int(i)) for i in keep[:n]]
        # An untrained RPN can leave fewer valid boxes than requested.
        while len(out) < n:
            out.append(Proposal(HorizontalBox(0.0, 0.0, float(cfg.image_size), float(cfg.image_size)), 0.0, -1))
        return out

    def rpn_propose(self, fused: Tensor) -> list[list[Proposal]]:
        obj, dl = self.rpn_head(fused)
        return [self.propose(obj.data[b], dl.data[b]) for b in range(fused.shape[0])]

    def rroi_head(self, pooled_h: Tensor) -> Tensor:
        """Learner outputs (R, 5): dx, dy, dw, dh and the sigmoid angle code."""
        raw = linear(self.params, "rroi.out", ad.relu(linear(self.params, "rroi.fc1", pooled_h)))
        geo = ad.index(raw, (slice(None), slice(0, 4)))
        t = ad.sigmoid(ad.index(raw, (slice(None), slice(4, 5))))
        return ad.concat([geo, t], axis=1)

    def hroi_to_rroi(self, pooled_h: Tensor, proposals: Sequence[Proposal]) -> list[OrientedBox]:
        out = self.rroi_head(pooled_h).data
        return [decode_rroi(p, o) for p, o in zip(proposals, out)]

    def heads_forward(self, pooled_r: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        h = ad.relu(linear(p, "head.fc1", pooled_r))
        h = ad.relu(linear(p, "head.fc2", h))
        return linear(p, "head.cls", h), linear(p, "head.reg", h)

    def embed(self, head: str, pooled: Tensor) -> Tensor:
        if head not in ("f1", "f2", "f3", "f4"):
            raise ValueError(f"unknown projection head {head!r}")
        return ad.l2_normalize(mlp2(self.params, head, pooled), axis=-1)

    def category_probs(self, head: str, pooled: Tensor) -> Tensor:
        if head not in ("g1", "g2"):
            raise ValueError(f"unknown category head {head!r}")
        return ad.softmax(mlp2(self.params, head, pooled))

    # inference
    def detect_batch(self, images) -> list[list[tuple[OrientedBox, int, float]]]:
        """Original branch only; per-class rotated NMS and score threshold."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        fused = self.fpn_fuse(self.backbone_forward(images))
        proposals = self.rpn_propose(fused)
        n = cfg.num_proposals
        g = cfg.pyramid_size
        mats = np.stack([sampling_matrix([hroi_points(p.hbox, cfg.pool_size) for p in props], g, PYRAMID_STRIDE)
                         for props in proposals])
        pooled_h = pool_rois(fused, mats, n, cfg)
        learner = self.rroi_head(pooled_h).data
        rrois = [[canonicalize(decode_rroi(p, learner[b * n + j])) for j, p in enumerate(props)]
                 for b, props in enumerate(proposals)]
        mats = np.stack([sampling_matrix([rroi_points(r, cfg.pool_size) for r in rr], g, PYRAMID_STRIDE)
                         for rr in rrois])
        pooled_r = pool_rois(fused, mats, n, cfg)
        logits, deltas = self.heads_forward(pooled_r)
        probs = ad.softmax(logits).data
        results = []
        for b in range(len(images)):
            cand_boxes, cand_cls, cand_scores = [], [], []
            for j in range(n):
                row = b * n + j
                box = decode_obb(rrois[b][j], deltas.data[row] * DELTA_STDS)
                for c in range(cfg.num_classes):
                    if probs[row, c] >= cfg.score_threshold:
                        cand_boxes.append(box)
                        cand_cls.append(c)
                        cand_scores.append(float(probs[row, c]))
            dets = []
            for c in range(cfg.num_classes):
                idx = [i for i, cc in enumerate(cand_cls) if cc == c]
                keep = rotated_nms([cand_boxes[i] for i in idx], [cand_scores[i] for i in idx], cfg.nms_threshold)
                dets += [(cand_boxes[idx[k]], c, cand_scores[idx[k]]) for k in keep]
            dets.sort(key=lambda d: -d[2])
            results.append(dets)
        return results

    def detect(self, image) -> list[tuple[OrientedBox, int, float]]:
        return self.detect_batch(np.asarray(image)[None])[0]


# hallucination on blocks ----------------------------------------------------------------------

def adain_batch(block: Tensor, mus: np.ndarray, sigmas: np.ndarray, eps: float = STD_EPS) -> Tensor:
    """Per-image AdaIN on (B, C, H, W) with target stats ``mus``/``sigmas`` of shape (B, C)."""
    mu, sigma = ad.channel_mean_std(block, eps)
    normed = ad.div(ad.sub(block, mu), sigma)
    return ad.add(ad.mul(normed, sigmas[:, :, None, None]), mus[:, :, None, None])


def hallucinate(blocks: Sequence[Tensor], styles: Sequence, enabled_blocks: Sequence[int]) -> list[Tensor]:
    """Apply one style per image to each enabled block; others pass through unchanged."""
    out = []
    for i, b in enumerate(blocks):
        if (i + 1) not in enabled_blocks:
            out.append(b)
            continue
        mus = np.stack([s.blocks[i].mu for s in styles])
        sigmas = np.stack([s.blocks[i].sigma for s in styles])
        out.append(adain_batch(b, mus, sigmas))
    return out
