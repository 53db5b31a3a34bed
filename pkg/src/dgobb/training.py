"""Training-time forward pass, run configuration, SGD loop and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor
from .detector import (DELTA_STDS, PYRAMID_STRIDE, Detector, DetectorConfig, Proposal, encode_hdeltas, encode_obb,
                       hallucinate, hbox_to_xyxy, hroi_points, pool_rois, rroi_points, rroi_targets,
                       sampling_matrix, theta_from_logit, decode_rroi, xyxy_to_hbox)
from .geometry import HorizontalBox, OrientedBox, canonicalize, hbox_iou_matrix, rotated_iou
from .losses import LOSS_TERMS, consistency_variant, info_nce_gated, total_loss
from .style import StyleBank, StyleEntry, channel_stats, sample_style

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RPN_POS_IOU, RPN_NEG_IOU = 0.5, 0.3
RPN_SAMPLES = 64
POS_FRACTION = 0.25
CSV_COLUMNS = ("step", "L_cls", "L_reg", "L_HCL", "L_RAC", "L_SEC", "total")


@dataclass
class Plan:
    """Every discrete decision of one training step.

    Replaying a plan makes the step loss a smooth function of the weights,
    which is what finite-difference checks need.
    """

    styles: list | None = None
    rpn_labels: np.ndarray | None = None     # (B, N) 1 pos, 0 neg, -1 ignore
    rpn_targets: np.ndarray | None = None    # (B, N, 4)
    proposals: list | None = None            # per image list[Proposal]
    gate_h: np.ndarray | None = None         # (B, n)
    learner_targets: np.ndarray | None = None  # (B*n, 5)
    rrois: list | None = None                # per image list[OrientedBox], canonical
    gate_r: np.ndarray | None = None         # (B, n)
    labels: np.ndarray | None = None         # (B*n,) class ids, K for background
    sampled: np.ndarray | None = None        # (B*n,) bool
    reg_targets: np.ndarray | None = None    # (B*n, 5) normalised


def _gt_arrays(gts):
    boxes, labels = gts
    hulls = np.array([hbox_to_xyxy(b.hull()) for b in boxes]).reshape(-1, 4)
    return list(boxes), list(labels), hulls


def _rpn_assign(anchors: np.ndarray, hulls: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    N = len(anchors)
    labels = np.full(N, -1, dtype=int)
    targets = np.zeros((N, 4))
    if len(hulls) == 0:
        neg = np.arange(N)
        labels[rng.choice(neg, size=min(RPN_SAMPLES, N), replace=False)] = 0
        return labels, targets
    ious = hbox_iou_matrix(anchors, hulls)
    best = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    pos = best_iou >= RPN_POS_IOU
    pos[ious.argmax(axis=0)] = True
    neg = (best_iou < RPN_NEG_IOU) & ~pos
    pos_idx = np.nonzero(pos)[0]
    neg_idx = np.nonzero(neg)[0]
    max_pos = RPN_SAMPLES // 2
    if len(pos_idx) > max_pos:
        pos_idx = rng.choice(pos_idx, size=max_pos, replace=False)
    n_neg = min(len(neg_idx), RPN_SAMPLES - len(pos_idx))
    neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    labels[neg_idx] = 0
    labels[pos_idx] = 1
    targets[pos_idx] = encode_hdeltas(anchors[pos_idx], hulls[best[pos_idx]])
    return labels, targets


def _jitter(hull: np.ndarray, rng, size: float) -> HorizontalBox:
    w, h = hull[2] - hull[0], hull[3] - hull[1]
    cx, cy = hull[0] + w / 2 + rng.uniform(-0.1, 0.1) * w, hull[1] + h / 2 + rng.uniform(-0.1, 0.1) * h
    w *= rng.uniform(0.85, 1.15)
    h *= rng.uniform(0.85, 1.15)
    box = np.clip([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 0.0, size)
    if box[2] - box[0] < 1 or box[3] - box[1] < 1:
        box = np.clip(hull, 0.0, size)
    return xyxy_to_hbox(box)


def training_proposals(model: Detector, obj: np.ndarray, deltas: np.ndarray, hulls: np.ndarray, rng) -> list[Proposal]:
    """RPN proposals with ground-truth hulls (exact and jittered) mixed in."""
    n = model.cfg.num_proposals
    size = float(model.cfg.image_size)
    extra: list[Proposal] = []
    for h in hulls:
        if len(extra) + 2 > n // 2:
            break
        extra.append(Proposal(xyxy_to_hbox(np.clip(h, 0.0, size)), 1.0, -1))
        extra.append(Proposal(_jitter(h, rng, size), 1.0, -1))
    return model.propose(obj, deltas, n - len(extra)) + extra


def _sample_rois(gate: np.ndarray, n: int, rng) -> np.ndarray:
    pos = np.nonzero(gate)[0]
    neg = np.nonzero(~gate)[0]
    max_pos = int(round(n * POS_FRACTION))
    if len(pos) > max_pos:
        pos = rng.choice(pos, size=max_pos, replace=False)
    n_neg = min(len(neg), n - len(pos))
    neg = rng.choice(neg, size=n_neg, replace=False)
    mask = np.zeros(len(gate), dtype=bool)
    mask[pos] = True
    mask[neg] = True
    return mask


def forward_losses(model: Detector, images: np.ndarray, gts: Sequence, rng: np.random.Generator,
                   bank: StyleBank | None = None, plan: Plan | None = None) -> tuple[dict, Plan, dict]:
    """Loss terms for one batch.

    ``gts`` holds ``(boxes, labels)`` per image. Returns the loss parts, the
    plan that was used, and the intermediate tensors (for inspection).
    """
    cfg = model.cfg
    replay = plan is not None
    plan = plan or Plan()
    B = len(images)
    n = cfg.num_proposals
    K = cfg.num_classes
    g = cfg.pyramid_size
    gt_info = [_gt_arrays(x) for x in gts]

    blocks = model.backbone_forward(images)
    two_branch = cfg.style or cfg.hcl or cfg.rac or cfg.sec
    if cfg.style:
        if not replay:
            if bank is None or len(bank) == 0:
                raise ValueError("style hallucination is enabled but no style bank was given")
            plan.styles = [sample_style(bank, rng) for _ in range(B)]
        hblocks = hallucinate(blocks, plan.styles, cfg.style_blocks)
    else:
        hblocks = blocks
    fused = model.fpn_fuse(blocks)
    fused_t = model.fpn_fuse(hblocks) if cfg.style else fused
    branches = [fused, fused_t] if two_branch and cfg.style else [fused]

    # RPN
    rpn_out = [model.rpn_head(f) for f in branches]
    obj0, dl0 = rpn_out[0]
    if not replay:
        labs, tgts = zip(*(_rpn_assign(model.anchors, info[2], rng) for info in gt_info))
        plan.rpn_labels, plan.rpn_targets = np.stack(labs), np.stack(tgts)
        plan.proposals = [training_proposals(model, obj0.data[b], dl0.data[b], gt_info[b][2], rng)
                          for b in range(B)]
    rl = plan.rpn_labels
    sampled_a = rl >= 0
    pos_a = rl == 1
    n_anchor = max(1, int(sampled_a.sum()))
    rpn_cls, rpn_reg = [], []
    for obj, dl in rpn_out:
        bce = ad.sub(ad.softplus(obj), ad.mul(obj, pos_a.astype(float)))
        rpn_cls.append(ad.scale(ad.tsum(ad.mul(bce, sampled_a.astype(float))), 1.0 / n_anchor))
        if pos_a.any():
            diff = ad.sub(ad.index(dl, pos_a), plan.rpn_targets[pos_a])
            rpn_reg.append(ad.scale(ad.tsum(ad.smooth_l1(diff, 1.0 / 9.0)), 1.0 / n_anchor))

    # horizontal RoIs
    mats_h = np.stack([sampling_matrix([hroi_points(p.hbox, cfg.pool_size) for p in props], g, PYRAMID_STRIDE)
                       for props in plan.proposals])
    pooled_h = [pool_rois(f, mats_h, n, cfg) for f in branches]
    learner = [model.rroi_head(ph) for ph in pooled_h]
    if not replay:
        gate_h = np.zeros((B, n), dtype=bool)
        assign_h = np.full((B, n), -1)
        for b, props in enumerate(plan.proposals):
            boxes, _, hulls = gt_info[b]
            if len(boxes) == 0:
                continue
            ious = hbox_iou_matrix(np.stack([hbox_to_xyxy(p.hbox) for p in props]), hulls)
            gate_h[b] = ious.max(axis=1) >= cfg.gate_threshold
            assign_h[b] = ious.argmax(axis=1)
        plan.gate_h = gate_h
        lt = np.zeros((B * n, 5))
        ldata = learner[0].data
        for b, props in enumerate(plan.proposals):
            for j, p in enumerate(props):
                if gate_h[b, j]:
                    pred_theta = theta_from_logit(ldata[b * n + j, 4])
                    lt[b * n + j] = rroi_targets(p, gt_info[b][0][assign_h[b, j]], pred_theta)
        plan.learner_targets = lt
        plan.rrois = [[canonicalize(decode_rroi(p, ldata[b * n + j])) for j, p in enumerate(props)]
                      for b, props in enumerate(plan.proposals)]
    gh = plan.gate_h.reshape(-1)
    learner_reg = []
    if gh.any():
        for lo in learner:
            geo = ad.index(lo, (gh, slice(0, 4)))
            theta = ad.scale(ad.sub(ad.index(lo, (gh, slice(4, 5))), 0.5), math.pi)
            pred = ad.concat([geo, theta], axis=1)
            diff = ad.div(ad.sub(pred, plan.learner_targets[gh]), DELTA_STDS)
            learner_reg.append(ad.scale(ad.tsum(ad.smooth_l1(diff)), 1.0 / (B * n)))

    # rotated RoIs
    mats_r = np.stack([sampling_matrix([rroi_points(r, cfg.pool_size) for r in rr], g, PYRAMID_STRIDE)
                       for rr in plan.rrois])
    pooled_r = [pool_rois(f, mats_r, n, cfg) for f in branches]
    if not replay:
        gate_r = np.zeros((B, n), dtype=bool)
        labels = np.full(B * n, K, dtype=int)
        reg_t = np.zeros((B * n, 5))
        for b, rr in enumerate(plan.rrois):
            boxes, cls, _ = gt_info[b]
            for j, r in enumerate(rr):
                if not boxes:
                    continue
                ious = [rotated_iou(r, gb) for gb in boxes]
                k = int(np.argmax(ious))
                if ious[k] >= cfg.gate_threshold:
                    gate_r[b, j] = True
                    labels[b * n + j] = cls[k]
                    reg_t[b * n + j] = encode_obb(r, boxes[k]) / DELTA_STDS
        plan.gate_r, plan.labels, plan.reg_targets = gate_r, labels, reg_t
        plan.sampled = np.concatenate([_sample_rois(gate_r[b], n, rng) for b in range(B)])
    gr = plan.gate_r.reshape(-1)
    smp = plan.sampled
    onehot = np.eye(K + 1)[plan.labels] * smp[:, None]
    n_smp = max(1, int(smp.sum()))
    head_cls, head_reg = [], []
    for pr in pooled_r:
        logits, deltas = model.heads_forward(pr)
        head_cls.append(ad.scale(ad.tsum(ad.mul(ad.log_softmax(logits), -onehot)), 1.0 / n_smp))
        pos = gr & smp
        if pos.any():
            diff = ad.sub(ad.index(deltas, pos), plan.reg_targets[pos])
            head_reg.append(ad.scale(ad.tsum(ad.smooth_l1(diff)), 1.0 / n_smp))

    nb = len(branches)
    parts = {
        "cls": ad.scale(ad.add(_sum(rpn_cls), _sum(head_cls)), 1.0 / nb),
        "reg": ad.scale(ad.add(ad.add(_sum(rpn_reg), _sum(learner_reg)), _sum(head_reg)), 1.0 / nb),
        "hcl": Tensor(0.0), "rac": Tensor(0.0), "sec": Tensor(0.0),
    }
    ph_t = pooled_h[-1]
    pr_t = pooled_r[-1]
    if cfg.hcl:
        parts["hcl"] = _paired_nce(model.embed("f1", pooled_h[0]), model.embed("f2", ph_t), plan.gate_h, cfg)
    if cfg.rac:
        parts["rac"] = _paired_nce(model.embed("f3", pooled_r[0]), model.embed("f4", pr_t), plan.gate_r, cfg)
    if cfg.sec and gr.any():
        p = model.category_probs("g1", ad.index(pooled_r[0], gr))
        q = model.category_probs("g2", ad.index(pr_t, gr))
        parts["sec"] = consistency_variant(p, q, cfg.sec_metric)
    extras = {"fused": fused, "fused_t": fused_t, "pooled_h": pooled_h, "pooled_r": pooled_r,
              "terms": {"rpn_cls": _sum(rpn_cls).item() / nb, "rpn_reg": _sum(rpn_reg).item() / nb,
                        "learner_reg": _sum(learner_reg).item() / nb, "head_cls": _sum(head_cls).item() / nb,
                        "head_reg": _sum(head_reg).item() / nb}}
    return parts, plan, extras


def _sum(ts):
    out = Tensor(0.0)
    for t in ts:
        out = ad.add(out, t)
    return out


def _paired_nce(z, z_t, gates: np.ndarray, cfg: DetectorConfig) -> Tensor:
    """Gated InfoNCE of ``[z_b; z_t_b]`` per image, averaged over gated anchors.

    The per-image kernel sums over its anchors; dividing by the gated count keeps
    the term on the scale of the detection losses whatever ``n`` is.
    """
    B, n = gates.shape
    total = Tensor(0.0)
    count = 0
    for b in range(B):
        if not gates[b].any():
            continue
        rows = slice(b * n, (b + 1) * n)
        zz = ad.concat([ad.index(z, rows), ad.index(z_t, rows)], axis=0)
        gg = np.concatenate([gates[b], gates[b]])
        total = ad.add(total, info_nce_gated(zz, gg, cfg.temperature))
        count += int(gg.sum())
    return ad.scale(total, 1.0 / max(1, count))


# configuration ------------------------------------------------------------------------------------

@dataclass
class BankConfig:
    """Where hallucinated styles come from.

    ``encoded`` runs photometrically perturbed source images through a frozen
    copy of the detector's backbone, so style statistics live in the same
    channel space and scale as the features they replace. The copy is retaken
    from the current weights every ``refresh_every`` steps (``None`` keeps the
    initial weights throughout). ``synthetic``
    draws mu ~ N(0, mu_scale^2) and sigma ~ LogNormal(0, log_sigma_scale^2).
    """

    kind: str = "encoded"  # encoded | synthetic | file
    size: int = 64
    refresh_every: int | None = 50
    mu_scale: float = 1.0
    log_sigma_scale: float = 0.5
    path: str | None = None
    seed: int = 1234


@dataclass
class DataConfig:
    """Generated dataset sizes; the same seed always yields the same images."""

    train_size: int = 200
    test_size: int = 50
    source: str = "A"
    targets: tuple = ("B", "C")
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("dataset sizes must be positive")
        if self.source in self.targets:
            raise ValueError(f"source domain {self.source!r} is also listed as a target")


def _sub_config(klass, d: dict, what: str):
    known = {f.name for f in fields(klass)}
    bad = set(d) - known
    if bad:
        raise KeyError(f"unknown {what} config keys: {sorted(bad)}")
    return klass(**d)


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    decay_epochs: tuple = (15,)
    batch_size: int = 4
    max_steps: int | None = None
    clip_norm: float | None = 35.0
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    bank: BankConfig = field(default_factory=BankConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    augment: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        d["decay_epochs"] = list(self.decay_epochs)
        d["data"]["targets"] = list(self.data.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "detector" in d and isinstance(d["detector"], dict):
            d["detector"] = DetectorConfig.from_dict(d["detector"])
        if "bank" in d and isinstance(d["bank"], dict):
            d["bank"] = _sub_config(BankConfig, d["bank"], "bank")
        if "data" in d and isinstance(d["data"], dict):
            d["data"] = _sub_config(DataConfig, d["data"], "data")
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        if "loss_weights" in d:
            bad = set(d["loss_weights"]) - set(LOSS_TERMS)
            if bad:
                raise KeyError(f"unknown loss weight keys: {sorted(bad)}")
            d["loss_weights"] = {**{k: 1.0 for k in LOSS_TERMS}, **d["loss_weights"]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_bank(cfg: RunConfig, samples=None, encoder=None) -> StyleBank:
    """The style bank ``cfg.bank`` describes.

    For ``encoded`` banks ``encoder`` defaults to a frozen copy of the
    detector's backbone at initialization.
    """
    from .detector import Backbone

    bc = cfg.bank
    if bc.kind == "synthetic":
        rng = np.random.default_rng(bc.seed)
        return StyleBank.synthetic(cfg.detector.widths, bc.size, rng, bc.mu_scale, bc.log_sigma_scale)
    if bc.kind == "file":
        if not bc.path:
            raise ValueError("bank kind 'file' needs a path")
        return StyleBank.load(bc.path)
    if bc.kind == "encoded":
        if encoder is None:
            encoder = Backbone.frozen(cfg.detector.widths, cfg.seed)
        return encode_bank(style_images(cfg, samples), encoder)
    raise ValueError(f"unknown bank kind {bc.kind!r}")


def style_images(cfg: RunConfig, samples) -> list[np.ndarray]:
    """Photometrically perturbed copies of randomly chosen source images."""
    if not samples:
        raise ValueError("bank kind 'encoded' needs source images")
    rng = np.random.default_rng(cfg.bank.seed)
    out = []
    for _ in range(cfg.bank.size):
        s = samples[int(rng.integers(len(samples)))]
        out.append(random_photometric(s.image, rng))
    return out


def encode_bank(images: Sequence[np.ndarray], encoder, chunk: int = 16) -> StyleBank:
    """Per-block channel statistics of each image under ``encoder``, batched."""
    bank = StyleBank()
    for start in range(0, len(images), chunk):
        blocks = encoder.forward(np.stack(images[start:start + chunk]))
        for j in range(blocks[0].shape[0]):
            stats = tuple(channel_stats(b.data[j]) for b in blocks)
            bank.append(StyleEntry(f"encoded-{start + j:04d}", stats))
    return bank


def random_photometric(img: np.ndarray, rng) -> np.ndarray:
    gain = rng.uniform(0.4, 1.6, 3)
    bias = rng.uniform(-0.2, 0.3, 3)
    gamma = rng.uniform(0.6, 1.6)
    out = np.clip(img * gain + bias, 0.0, 1.0) ** gamma
    return np.clip(out + rng.normal(0, rng.uniform(0, 0.05), img.shape), 0.0, 1.0)


# augmentation --------------------------------------------------------------------------------------

def flip_sample(image: np.ndarray, boxes, horizontal: bool, vertical: bool):
    size = image.shape[1]
    img = image
    out = list(boxes)
    if horizontal:
        img = img[:, ::-1]
        out = [canonicalize(OrientedBox(size - b.cx, b.cy, b.w, b.h, -b.theta)) for b in out]
    if vertical:
        img = img[::-1]
        out = [canonicalize(OrientedBox(b.cx, size - b.cy, b.w, b.h, -b.theta)) for b in out]
    return np.ascontiguousarray(img), out


# training loop ------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    history: list
    steps: int
    seconds: float
    rng_state: dict


def lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * (0.1 ** sum(1 for e in cfg.decay_epochs if epoch >= e))


def train(cfg: RunConfig, samples: Sequence, log_path=None, bank: StyleBank | None = None,
          progress: bool = False) -> TrainResult:
    """Train on source-domain ``samples``; one CSV row of loss terms per step."""
    if not samples:
        raise ValueError("no training samples")
    det_cfg = cfg.detector
    model = Detector(det_cfg, seed=cfg.seed)
    refresh_images = None
    if det_cfg.style and bank is None:
        if cfg.bank.kind == "encoded" and cfg.bank.refresh_every:
            refresh_images = style_images(cfg, samples)
        else:
            bank = build_bank(cfg, samples)
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 7])
    enabled = {"cls": True, "reg": True, "hcl": det_cfg.hcl, "rac": det_cfg.rac, "sec": det_cfg.sec}
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
    t0 = time.perf_counter()
    step = 0
    bs = cfg.batch_size
    try:
        for epoch in range(cfg.epochs):
            opt.lr = lr_at(cfg, epoch)
            order = rng.permutation(len(samples))
            for start in range(0, len(order), bs):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                if refresh_images is not None and step % cfg.bank.refresh_every == 0:
                    bank = encode_bank(refresh_images, model.backbone.snapshot())
                batch = [samples[i] for i in order[start:start + bs]]
                images, gts = [], []
                for s in batch:
                    img, boxes = s.image, s.boxes
                    if cfg.augment:
                        img, boxes = flip_sample(img, boxes, bool(rng.integers(2)), bool(rng.integers(2)))
                    images.append(img)
                    gts.append((boxes, s.labels))
                model.params.zero_grad()
                try:
                    with Tape():
                        parts, _, extras = forward_losses(model, np.stack(images), gts, rng, bank)
                        loss = total_loss(parts, enabled, cfg.loss_weights)
                        if not math.isfinite(loss.item()):
                            raise FloatingPointError("non-finite total loss")
                        ad.backward(loss)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"training aborted at step {step}: {exc}") from None
                opt.step()
                row = [step] + [parts[k].item() if enabled[k] else 0.0 for k in LOSS_TERMS] + [loss.item()]
                history.append(row)
                if writer:
                    writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                if progress and step % 50 == 0:
                    logger.info("step %d loss %.4f (%s) [%s]", step, loss.item(),
                                ", ".join(f"{k}={parts[k].item():.3f}" for k in LOSS_TERMS),
                                ", ".join(f"{k}={v:.3f}" for k, v in extras["terms"].items()))
                step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(model, history, step, time.perf_counter() - t0, rng.bit_generator.state)


# checkpoints ---------------------------------------------------------------------------------------

def save_checkpoint(path_prefix, model: Detector, run_cfg: RunConfig, step: int = 0,
                    rng_state: dict | None = None) -> Path:
    """Write ``<prefix>.json`` (header) and ``<prefix>.f64`` (little-endian blob)."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensors, offset, chunks = [], 0, []
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
        chunks.append(arr.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "config": run_cfg.to_dict(),
        "step": int(step),
        "rng_state": rng_state,
        "blob": prefix.name + ".f64",
        "tensors": tensors,
    }
    prefix.with_suffix(".f64").write_bytes(b"".join(chunks))
    hp = prefix.with_suffix(".json")
    hp.write_text(json.dumps(header, indent=1))
    return hp


def load_checkpoint(header_path) -> tuple[Detector, RunConfig, dict]:
    hp = Path(header_path)
    if hp.suffix != ".json":
        hp = hp.with_suffix(".json")
    if not hp.exists():
        raise FileNotFoundError(f"checkpoint not found: {hp}")
    header = json.loads(hp.read_text())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{hp}: unsupported checkpoint version {header.get('version')}")
    cfg = RunConfig.from_dict(header["config"])
    blob = (hp.parent / header["blob"]).read_bytes()
    model = Detector(cfg.detector, seed=cfg.seed)
    state = {}
    for t in header["tensors"]:
        end = t["offset"] + 8 * t["count"]
        if end > len(blob):
            raise ValueError(f"{hp}: blob truncated at tensor {t['name']}")
        state[t["name"]] = np.frombuffer(blob[t["offset"]:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
    model.params.load_state(state)
    return model, cfg, header


def evaluate_model(model: Detector, samples: Sequence, iou_thr: float = 0.5, batch_size: int = 16):
    """Run :meth:`Detector.detect_batch` over ``samples`` and score the detections."""
    from .evaluate import Detection, GroundTruth, evaluate

    dets, gts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        outs = model.detect_batch(np.stack([s.image for s in chunk]))
        for s, out in zip(chunk, outs):
            dets += [Detection(s.id, box, c, score) for box, c, score in out]
            gts += [GroundTruth(s.id, b, c) for b, c in zip(s.boxes, s.labels)]
    return evaluate(dets, gts, model.cfg.num_classes, iou_thr), dets
