"""Finite-difference harness for gradients through the whole detector."""
import math

import numpy as np

from dgobb.autodiff import Tape, backward
from dgobb.detector import Detector, DetectorConfig
from dgobb.losses import LOSS_TERMS, total_loss
from dgobb.style import StyleBank
from dgobb.training import forward_losses

from oracles import rel_err

PARAM_SAMPLE = ("backbone.conv1.w", "backbone.conv3.w", "fpn.lat2.w", "rpn.conv.w", "rpn.obj.w", "rpn.delta.w",
                "rroi.fc1.w", "rroi.out.w", "head.fc1.w", "head.cls.w", "head.reg.w", "f1.fc1.w", "f4.fc2.w",
                "g1.fc1.w", "g2.fc2.w")


def _kinked(f0, stencils, h):
    """Central differences at ``h`` and ``h / 2`` disagreeing beyond O(h^2) and
    roundoff: a ReLU or smooth-L1 boundary lies inside the stencil."""
    (fp, fm), (fp2, fm2) = stencils
    for k in f0:
        d1 = (fp[k] - fm[k]) / (2 * h)
        d2 = (fp2[k] - fm2[k]) / h
        if abs(d1 - d2) > 1e-6 * (abs(d1) + abs(d2)) + 1e-9 * max(1.0, abs(f0[k])):
            return True
    return False


def end_to_end_errors(seed, batch, h=1e-5):
    """Worst relative error, per loss term and for the total, between backprop
    and central differences over a sample of parameter coordinates."""
    cfg = DetectorConfig()
    model = Detector(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    bank = StyleBank.synthetic(cfg.widths, 3, rng, 0.3, 0.3)
    imgs, gts = batch
    _, plan, _ = forward_losses(model, imgs, gts, rng, bank)

    def values():
        parts, _, _ = forward_losses(model, imgs, gts, rng, bank, plan)
        return {k: v.item() for k, v in parts.items()}

    coords = []
    for pname in PARAM_SAMPLE:
        coords.append((pname, int(rng.integers(model.params[pname].size))))
    def stencil(pname, i, steps=(h, h / 2)):
        flat = model.params[pname].data.reshape(-1)
        orig = flat[i]
        out = []
        for step in steps:
            flat[i] = orig + step
            fp = values()
            flat[i] = orig - step
            fm = values()
            out.append((fp, fm))
        flat[i] = orig
        return out

    # Jitter coordinates whose stencil straddles a non-differentiable boundary,
    # then take every difference at the final point. The plan is replayed, so the
    # discrete decisions stay fixed.
    f0 = values()
    for _ in range(20):
        moved = False
        for pname, i in coords:
            if _kinked(f0, stencil(pname, i), h):
                model.params[pname].data.reshape(-1)[i] += rng.uniform(-1e-3, 1e-3)
                moved = True
                f0 = values()
        if not moved:
            break
    numeric = {}
    for pname, i in coords:
        (fp, fm), = stencil(pname, i, (h,))
        diffs = {k: (fp[k] - fm[k]) / (2 * h) for k in fp}
        # The total's difference is taken term by term: the same quantity in exact
        # arithmetic, without the cancellation against the large contrastive terms.
        numeric[pname, i] = {**diffs, "total": math.fsum(diffs.values())}

    terms = {k: (lambda p, k=k: p[k]) for k in LOSS_TERMS}
    terms["total"] = total_loss
    worst = {k: 0.0 for k in terms}
    for name, fn in terms.items():
        model.params.zero_grad()
        with Tape():
            parts, _, _ = forward_losses(model, imgs, gts, rng, bank, plan)
            backward(fn(parts))
        grads = model.params.grads()
        for (pname, i), num in numeric.items():
            worst[name] = max(worst[name], rel_err(grads[pname].reshape(-1)[i], num[name]))
    return worst
