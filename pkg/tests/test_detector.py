import math

import numpy as np
import pytest

from dgobb import autodiff as ad
from dgobb.autodiff import Tensor, grad_check
from dgobb.detector import (Detector, DetectorConfig, Proposal, decode_obb, decode_rroi,
                            encode_obb, hallucinate, hroi_pool, make_anchors, rroi_align)
from dgobb.geometry import HorizontalBox, OrientedBox, canonicalize, rotated_iou
from dgobb.style import StyleBank
from dgobb.synth import DOMAIN_STYLES, SceneSpec, generate_split
from dgobb.training import forward_losses

from e2e_grad import end_to_end_errors

CFG = DetectorConfig()


@pytest.fixture(scope="module")
def model():
    return Detector(CFG, seed=0)


@pytest.fixture(scope="module")
def batch():
    samples = generate_split(SceneSpec(), DOMAIN_STYLES["A"], 0, "train", 2)
    return np.stack([s.image for s in samples]), [(s.boxes, s.labels) for s in samples]


# configuration ----------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"num_proposals": 1}, {"temperature": 0.0}, {"embed_dim": 4},
                                {"widths": (8, 16, 32)}, {"style_blocks": (0,)}, {"sec_metric": "cos"}])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        DetectorConfig(**kw)


def test_config_dict_round_trip():
    cfg = DetectorConfig(hcl=False, style_blocks=(1, 3))
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        DetectorConfig.from_dict({**cfg.to_dict(), "depth": 3})


# backbone and fusion ----------------------------------------------------------------------------

def test_backbone_shapes_and_strides(model):
    feats = model.backbone_forward(np.zeros((2, 64, 64, 3)))
    assert [f.shape for f in feats] == [(2, 8, 64, 64), (2, 16, 32, 32), (2, 32, 16, 16), (2, 32, 16, 16)]
    with pytest.raises(ValueError):
        model.backbone_forward(np.zeros((1, 32, 32, 3)))


def test_zero_image_with_zero_bias_gives_zero_maps(model):
    # biases are initialised to zero
    assert all(np.all(f.data == 0) for f in model.backbone_forward(np.zeros((1, 64, 64, 3))))


def test_backbone_is_reproducible(batch):
    a = Detector(CFG, seed=3).backbone_forward(batch[0])
    b = Detector(CFG, seed=3).backbone_forward(batch[0])
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_fuse_is_linear_and_zero_preserving(model):
    rng = np.random.default_rng(0)
    blocks = [Tensor(rng.normal(size=s)) for s in [(1, 8, 64, 64), (1, 16, 32, 32), (1, 32, 16, 16), (1, 32, 16, 16)]]
    fused = model.fpn_fuse(blocks).data
    assert fused.shape == (1, 32, 16, 16)
    doubled = model.fpn_fuse([Tensor(2 * b.data) for b in blocks]).data
    assert np.allclose(doubled, 2 * fused, rtol=1e-12, atol=1e-12)
    assert np.all(model.fpn_fuse([Tensor(np.zeros(b.shape)) for b in blocks]).data == 0)
    with pytest.raises(ValueError):
        model.fpn_fuse(blocks[:3])


def test_fuse_gradient(model):
    rng = np.random.default_rng(1)
    up = rng.normal(size=(1, 32, 16, 16))
    others = [Tensor(rng.normal(size=s)) for s in [(1, 8, 64, 64), (1, 32, 16, 16), (1, 32, 16, 16)]]
    x = rng.normal(size=(1, 16, 32, 32))
    f = lambda t: ad.tsum(ad.mul(model.fpn_fuse([others[0], t, others[1], others[2]]), up))
    assert grad_check(f, x, coords=rng.choice(x.size, 60, replace=False)) < 1e-4


# proposals --------------------------------------------------------------------------------------

def test_untrained_rpn_returns_exactly_n_clipped(model, batch):
    fused = model.fpn_fuse(model.backbone_forward(batch[0]))
    for props in model.rpn_propose(fused):
        assert len(props) == CFG.num_proposals
        for p in props:
            assert p.hbox.x >= 0 and p.hbox.y >= 0 and p.hbox.x2 <= 64 and p.hbox.y2 <= 64
            assert 0.0 <= p.objectness < 1.0


def test_propose_pads_when_few_boxes_are_valid(model):
    N = len(model.anchors)
    deltas = np.zeros((N, 4))
    deltas[:, 2:] = -20.0  # shrink every anchor to nothing
    props = model.propose(np.zeros(N), deltas)
    assert len(props) == CFG.num_proposals


def test_planted_objectness_peak(model):
    anchors = make_anchors(CFG)
    N = len(anchors)
    for gt in ([20.0, 22.0, 36.0, 38.0], [40.0, 8.0, 50.0, 18.0], [5.0, 30.0, 31.0, 56.0]):
        gt = np.array(gt)
        ix = np.maximum(0, np.minimum(anchors[:, 2], gt[2]) - np.maximum(anchors[:, 0], gt[0]))
        iy = np.maximum(0, np.minimum(anchors[:, 3], gt[3]) - np.maximum(anchors[:, 1], gt[1]))
        inter = ix * iy
        area = lambda b: (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
        ious = inter / (area(anchors) + area(gt) - inter)
        obj = np.full(N, -5.0)
        obj[np.argmax(ious)] = 8.0
        top = model.propose(obj, np.zeros((N, 4)))[0]
        h = top.hbox
        inter = max(0, min(h.x2, gt[2]) - max(h.x, gt[0])) * max(0, min(h.y2, gt[3]) - max(h.y, gt[1]))
        assert inter / (h.w * h.h + area(gt) - inter) > 0.5


# pooling ----------------------------------------------------------------------------------------

def test_pooling_constant_map():
    fused = Tensor(np.full((3, 16, 16), 2.5))
    p = Proposal(HorizontalBox(5, 7, 20, 11), 0.5, 0)
    assert np.allclose(hroi_pool(fused, p, CFG).data, 2.5, atol=1e-12)
    r = OrientedBox(30, 30, 20, 8, 0.7)
    assert np.allclose(rroi_align(fused, r, CFG).data, 2.5, atol=1e-12)


def test_full_image_box_on_four_by_four_map():
    f = np.random.default_rng(2).normal(size=(2, 16, 16))
    cfg = DetectorConfig(image_size=16)  # pyramid 4x4 at stride 4
    fused = Tensor(f[:, :4, :4])
    out = hroi_pool(fused, Proposal(HorizontalBox(0, 0, 16, 16), 1.0, 0), cfg).data
    assert np.allclose(out, f[:, :4, :4], atol=1e-12)


def test_axis_aligned_rroi_matches_hroi():
    f = Tensor(np.random.default_rng(3).normal(size=(4, 16, 16)))
    hb = HorizontalBox(10.0, 14.0, 22.0, 12.0)
    r = OrientedBox(hb.x + hb.w / 2, hb.y + hb.h / 2, hb.w, hb.h, 0.0)
    assert np.max(np.abs(hroi_pool(f, Proposal(hb, 0.5, 0), CFG).data - rroi_align(f, r, CFG).data)) < 1e-9


def test_rroi_align_quarter_turn_equivariance():
    rng = np.random.default_rng(4)
    for _ in range(10):
        f = rng.normal(size=(3, 16, 16))
        cx, cy = rng.uniform(24, 40, 2)
        r = OrientedBox(cx, cy, rng.uniform(8, 20), rng.uniform(4, 8), rng.uniform(-1.5, 1.5))
        # rotate the image plane by +90 degrees about its centre
        f_rot = np.ascontiguousarray(np.rot90(f, -1, axes=(1, 2)))
        r_rot = OrientedBox(32 - (cy - 32), 32 + (cx - 32), r.w, r.h, r.theta + math.pi / 2)
        a = rroi_align(Tensor(f), r, CFG).data
        b = rroi_align(Tensor(f_rot), r_rot, CFG).data
        assert np.max(np.abs(a - b)) < 1e-6


def test_pooling_gradients():
    rng = np.random.default_rng(5)
    for _ in range(5):
        f = rng.normal(size=(2, 16, 16))
        up = rng.normal(size=(2, 4, 4))
        r = OrientedBox(*rng.uniform(20, 44, 2), rng.uniform(8, 20), rng.uniform(4, 8), rng.uniform(-1.5, 1.5))
        p = Proposal(HorizontalBox(*rng.uniform(4, 20, 2), *rng.uniform(10, 30, 2)), 0.5, 0)
        assert grad_check(lambda t: ad.tsum(ad.mul(rroi_align(t, r, CFG), up)), f) < 1e-4
        assert grad_check(lambda t: ad.tsum(ad.mul(hroi_pool(t, p, CFG), up)), f) < 1e-4


# RRoI learner and heads -------------------------------------------------------------------------

def test_zero_learner_head_returns_axis_aligned_hbox():
    model = Detector(CFG, seed=1)
    model.params["rroi.out.w"].data[:] = 0.0
    model.params["rroi.out.b"].data[:] = 0.0
    p = Proposal(HorizontalBox(10, 12, 20, 8), 0.9, 0)
    pooled = Tensor(np.random.default_rng(6).normal(size=(1, CFG.pooled_dim)))
    r = model.hroi_to_rroi(pooled, [p])[0]
    assert r.theta == 0.0
    assert (r.cx, r.cy, r.w, r.h) == pytest.approx((20, 16, 20, 8), abs=1e-12)


def test_learner_outputs_are_valid_boxes():
    rng = np.random.default_rng(7)
    p = Proposal(HorizontalBox(10, 12, 20, 8), 0.9, 0)
    for _ in range(200):
        out = rng.normal(0, 5, 5)
        out[4] = rng.uniform()
        r = decode_rroi(p, out)
        assert r.w > 0 and r.h > 0 and -math.pi / 2 <= r.theta < math.pi / 2


def test_obb_coding_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(100):
        r = canonicalize(OrientedBox(*rng.uniform(10, 50, 2), rng.uniform(6, 20), rng.uniform(3, 6),
                                     rng.uniform(-1.5, 1.5)))
        g = canonicalize(OrientedBox(r.cx + rng.normal(), r.cy + rng.normal(), r.w * rng.uniform(0.7, 1.3),
                                     r.h * rng.uniform(0.7, 1.3), r.theta + rng.normal(0, 0.3)))
        back = decode_obb(r, encode_obb(r, g))
        assert rotated_iou(back, g) > 1 - 1e-9


def test_heads_give_finite_logits(model):
    x = Tensor(np.random.default_rng(9).normal(size=(6, CFG.pooled_dim)))
    logits, deltas = model.heads_forward(x)
    assert logits.shape == (6, CFG.num_classes + 1) and deltas.shape == (6, 5)
    assert np.all(np.isfinite(logits.data))
    assert np.allclose(ad.softmax(logits).data.sum(axis=1), 1.0, atol=1e-12)


# branches and proposal sharing ------------------------------------------------------------------

def test_identity_styles_leave_branch_bit_identical(model, batch):
    blocks = model.backbone_forward(batch[0])
    bank = StyleBank(channels=CFG.widths)
    from dgobb.style import ChannelStats, StyleEntry
    # per-image own statistics reproduce the maps up to the epsilon effect
    own = []
    for b in range(2):
        stats = tuple(ChannelStats(np.zeros(c), np.ones(c)) for c in CFG.widths)
        own.append(StyleEntry(f"e{b}", stats))
    assert hallucinate(blocks, own, ()) == list(blocks)  # no block enabled: same tensors
    fused = model.fpn_fuse(blocks).data
    assert np.array_equal(model.fpn_fuse(hallucinate(blocks, own, ())).data, fused)
    del bank


def test_proposals_are_shared_between_branches(model, batch):
    bank = StyleBank.synthetic(CFG.widths, 4, np.random.default_rng(0))
    parts, plan, extras = forward_losses(model, batch[0], batch[1], np.random.default_rng(1), bank)
    # the hallucinated branch pools exactly the same geometry: replaying the plan on
    # the original maps in both branch slots gives identical pooled features
    assert len(extras["pooled_r"]) == 2
    assert not np.array_equal(extras["fused"].data, extras["fused_t"].data)
    assert all(len(r) == CFG.num_proposals for r in plan.rrois)
    # re-running the step with the same plan reproduces every number
    again, _, _ = forward_losses(model, batch[0], batch[1], np.random.default_rng(99), bank, plan)
    assert {k: v.item() for k, v in again.items()} == {k: v.item() for k, v in parts.items()}


# end-to-end gradients ---------------------------------------------------------------------------

def test_end_to_end_gradients(batch):
    for seed in range(20):
        worst = end_to_end_errors(seed, batch)
        assert max(worst.values()) < 1e-4, (seed, worst)
