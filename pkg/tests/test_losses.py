import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import jensenshannon

from dgobb import autodiff as ad
from dgobb.autodiff import Tensor, grad_check
from dgobb.detector import Detector, DetectorConfig
from dgobb.losses import (consistency_variant, info_nce_gated, jsd_consistency, total_loss,
                          uniform_limit)

LN2 = math.log(2.0)


def nce_loops(z, gates, tau):
    """Plain-loop reference for the gated InfoNCE with positive-inclusive denominator."""
    z = np.asarray(z, float)
    m = len(z)
    n = m // 2
    total = 0.0
    for j in range(m):
        if not gates[j]:
            continue
        pos = (j + n) % m
        den = sum(math.exp(float(z[j] @ z[k]) / tau) for k in range(m) if k != j)
        total -= gates[j] * math.log(math.exp(float(z[j] @ z[pos]) / tau) / den)
    return total


def unit_rows(rng, m, d):
    z = rng.normal(size=(m, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def simplex_rows(rng, n, k):
    return rng.dirichlet(np.full(k, rng.uniform(0.2, 2.0)), size=n)


# InfoNCE ----------------------------------------------------------------------------------------

def test_nce_all_gates_off_is_exactly_zero():
    z = unit_rows(np.random.default_rng(0), 6, 4)
    assert info_nce_gated(z, np.zeros(6), 0.1).item() == 0.0


def test_nce_single_pair_is_zero():
    z = unit_rows(np.random.default_rng(1), 2, 5)
    assert info_nce_gated(z, np.ones(2), 0.1).item() == pytest.approx(0.0, abs=1e-12)


def test_nce_orthogonal_pairs_example():
    e1, e2 = np.eye(2)
    got = info_nce_gated(np.stack([e1, e2, e1, e2]), np.ones(4), 1.0).item()
    assert got == pytest.approx(4 * -math.log(math.e / (math.e + 2)), abs=1e-12)
    # per anchor -log(e / (e + 2)) = 0.5514
    assert got == pytest.approx(2.2058, abs=1e-4)


def test_nce_rejects_bad_temperature_and_shapes():
    z = unit_rows(np.random.default_rng(2), 4, 3)
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            info_nce_gated(z, np.ones(4), tau)
    with pytest.raises(ValueError):
        info_nce_gated(z[:3], np.ones(3), 0.1)
    with pytest.raises(ValueError):
        info_nce_gated(z, np.ones(3), 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.floats(0.05, 5.0))
def test_nce_matches_loop_reference(seed, n, tau):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, 2 * n, 8)
    g = rng.integers(0, 2, n).astype(float)
    gates = np.concatenate([g, g])
    got = info_nce_gated(z, gates, tau).item()
    assert got == pytest.approx(nce_loops(z, gates, tau), rel=1e-10, abs=1e-10)
    assert got >= -1e-12


def test_nce_is_stable_at_small_temperature():
    z = unit_rows(np.random.default_rng(3), 8, 4)
    got = info_nce_gated(z, np.ones(8), 1e-3).item()
    assert math.isfinite(got) and got >= 0


def test_removing_gated_out_column_only_changes_denominators():
    rng = np.random.default_rng(4)
    n = 4
    z = unit_rows(rng, 2 * n, 6)
    gates = np.array([1, 1, 0, 1] * 2, dtype=float)
    tau = 0.3
    full = info_nce_gated(z, gates, tau).item()
    # Recompute by hand: anchors only over gated rows, negatives over every row.
    manual = 0.0
    for j in np.flatnonzero(gates):
        logits = z @ z[j] / tau
        others = np.delete(logits, j)
        manual += np.log(np.sum(np.exp(others))) - logits[(j + n) % (2 * n)]
    assert full == pytest.approx(manual, rel=1e-12)
    # Dropping the gated-out pair removes only its negative terms.
    keep = np.array([0, 1, 3, 4, 5, 7])
    reduced = 0.0
    for j in np.flatnonzero(gates):
        logits = z @ z[j] / tau
        den = np.sum(np.exp(logits[[k for k in keep if k != j]]))
        reduced += np.log(den) - logits[(j + n) % (2 * n)]
    assert info_nce_gated(z[keep], gates[keep], tau).item() == pytest.approx(reduced, rel=1e-12)
    assert reduced < full


def test_nce_uniform_limit():
    rng = np.random.default_rng(5)
    for n in (2, 3, 8):
        z = unit_rows(rng, 2 * n, 5)
        gates = np.concatenate([rng.integers(0, 2, n)] * 2).astype(float)
        got = info_nce_gated(z, gates, 1e4).item()
        assert abs(got - uniform_limit(gates, 2 * n)) < 1e-3


def test_nce_gradient_through_normalization():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        raw = rng.normal(size=(2 * n, 6))
        gates = np.concatenate([rng.integers(0, 2, n)] * 2).astype(float)
        gates[0] = gates[n] = 1.0
        f = lambda t: info_nce_gated(ad.l2_normalize(t, axis=-1), gates, 0.5)
        assert grad_check(f, raw) < 1e-4


def test_projection_then_nce_gradient():
    cfg = DetectorConfig(style=True, hcl=True)
    model = Detector(cfg, seed=0)
    rng = np.random.default_rng(7)
    D = cfg.pooled_dim
    checked = 0
    for _ in range(20):
        pooled = rng.normal(size=(6, D)) * 0.5
        gates = np.array([1, 0, 1, 1, 0, 1], dtype=float)

        def f(t):
            z = ad.concat([model.embed("f1", ad.index(t, slice(0, 3))),
                           model.embed("f2", ad.index(t, slice(3, 6)))], axis=0)
            return info_nce_gated(z, gates, 0.1)

        coords = rng.choice(pooled.size, 40, replace=False)
        assert grad_check(f, pooled, coords=coords) < 1e-4
        checked += 1
    assert checked == 20


def test_embeddings_have_unit_norm_and_are_deterministic():
    model = Detector(DetectorConfig(), seed=0)
    x = np.random.default_rng(8).normal(size=(5, model.cfg.pooled_dim))
    z = model.embed("f3", Tensor(x)).data
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(z, model.embed("f3", Tensor(x)).data)
    with pytest.raises(ValueError):
        model.embed("g1", Tensor(x))


# JSD and variants -------------------------------------------------------------------------------

def test_jsd_examples():
    assert jsd_consistency([[1.0, 0.0]], [[0.0, 1.0]]).item() == pytest.approx(LN2, abs=1e-10)
    p = np.array([[0.2, 0.3, 0.5]])
    assert jsd_consistency(p, p).item() == 0.0


def test_jsd_properties_over_many_pairs():
    rng = np.random.default_rng(9)
    p = simplex_rows(rng, 10_000, 4)
    q = simplex_rows(rng, 10_000, 4)
    # row-wise values through a batch of one row each
    vals = np.array([jsd_consistency(p[i:i + 1], q[i:i + 1]).item() for i in range(10_000)])
    back = np.array([jsd_consistency(q[i:i + 1], p[i:i + 1]).item() for i in range(10_000)])
    same = np.array([jsd_consistency(p[i:i + 1], p[i:i + 1]).item() for i in range(10_000)])
    assert vals.min() >= 0.0 and vals.max() <= LN2 + 1e-9
    assert np.max(np.abs(vals - back)) <= 1e-12
    assert np.all(same == 0.0)


def test_jsd_matches_scipy():
    rng = np.random.default_rng(10)
    p = simplex_rows(rng, 200, 5)
    q = simplex_rows(rng, 200, 5)
    ref = np.mean([jensenshannon(a, b) ** 2 for a, b in zip(p, q)])
    assert jsd_consistency(p, q).item() == pytest.approx(ref, rel=1e-9)


def test_jsd_shape_mismatch():
    with pytest.raises(ValueError):
        jsd_consistency(np.ones((2, 3)) / 3, np.ones((2, 4)) / 4)


def test_jsd_gradient():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        q = simplex_rows(rng, 3, 4)
        assert grad_check(lambda t: jsd_consistency(ad.softmax(t), q), a) < 1e-4


def test_variant_examples():
    p, q = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert consistency_variant(p, q, "l2").item() == 2.0
    kl = consistency_variant([[0.5, 0.5]], [[0.25, 0.75]], "kl").item()
    assert kl == pytest.approx(0.5 * LN2 + 0.5 * math.log(2 / 3), abs=1e-10)
    assert kl == pytest.approx(0.1438, abs=1e-4)
    assert consistency_variant(p, q, "jsd").item() == pytest.approx(LN2, abs=1e-10)


@pytest.mark.parametrize("metric", ["l2", "kl", "jsd"])
def test_variants_vanish_on_identical_inputs(metric):
    p = simplex_rows(np.random.default_rng(12), 6, 3)
    assert consistency_variant(p, p, metric).item() == 0.0


def test_variant_unknown_metric():
    with pytest.raises(ValueError, match="unknown"):
        consistency_variant(np.ones((1, 2)) / 2, np.ones((1, 2)) / 2, "cosine")


@pytest.mark.parametrize("metric", ["l2", "kl"])
def test_variant_gradients(metric):
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = rng.normal(size=(2, 3))
        q = simplex_rows(rng, 2, 3)
        assert grad_check(lambda t: consistency_variant(ad.softmax(t), q, metric), a) < 1e-4


# total ------------------------------------------------------------------------------------------

def test_total_is_plain_sum():
    vals = dict(cls=0.7, reg=0.31, hcl=2.5, rac=1.25, sec=0.05)
    parts = {k: Tensor(v) for k, v in vals.items()}
    assert total_loss(parts).item() == pytest.approx(sum(vals.values()), abs=1e-12)
    assert total_loss({k: Tensor(0.0) for k in vals}).item() == 0.0


def test_disabled_terms_contribute_nothing():
    parts = {k: Tensor(v) for k, v in dict(cls=0.7, reg=0.3, hcl=9.0, rac=9.0, sec=9.0).items()}
    off = {"hcl": False, "rac": False, "sec": False}
    assert total_loss(parts, off).item() == pytest.approx(1.0, abs=1e-15)


def test_total_weights():
    parts = {"cls": Tensor(1.0), "reg": Tensor(2.0), "sec": Tensor(4.0)}
    assert total_loss(parts, weights={"sec": 0.5}).item() == 5.0
