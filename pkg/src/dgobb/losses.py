"""Consistency objectives between original and style-hallucinated RoIs."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12
LOSS_TERMS = ("cls", "reg", "hcl", "rac", "sec")


def info_nce_gated(z, gates, tau: float) -> Tensor:
    """Gated InfoNCE over ``2n`` unit embeddings.

    ``z`` is (2n, d); row ``j`` and row ``j + n`` (mod 2n) are positives. Each
    anchor's denominator runs over every other row, the positive included.
    Gated-out anchors contribute nothing but still act as negatives.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = ad.as_tensor(z)
    m = z.shape[0]
    if m % 2:
        raise ValueError(f"need an even number of embeddings, got {m}")
    gates = np.asarray(gates, dtype=np.float64).reshape(-1)
    if gates.size != m:
        raise ValueError(f"{gates.size} gates for {m} embeddings")
    if not gates.any():
        return Tensor(0.0)
    n = m // 2
    pos = (np.arange(m) + n) % m
    logits = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    # Self-similarity is removed by a large negative offset on the diagonal.
    self_mask = np.where(np.eye(m, dtype=bool), -1e9, 0.0)
    lse = ad.logsumexp(ad.add(logits, self_mask), axis=-1)
    pos_logit = ad.index(logits, (np.arange(m), pos))
    per_anchor = ad.sub(lse, pos_logit)
    return ad.tsum(ad.mul(per_anchor, gates))


def _as_probs(p) -> Tensor:
    return ad.as_tensor(p)


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL[p || q] with a floor inside the logs."""
    lp = ad.log(ad.add(p, LOG_FLOOR))
    lq = ad.log(ad.add(q, LOG_FLOOR))
    return ad.tsum(ad.mul(p, ad.sub(lp, lq)), axis=-1)


def jsd_consistency(p, p_tilde) -> Tensor:
    """Jensen-Shannon divergence between matching rows, averaged over rows."""
    p, q = _as_probs(p), _as_probs(p_tilde)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    mid = ad.scale(ad.add(p, q), 0.5)
    per_row = ad.scale(ad.add(_kl_rows(p, mid), _kl_rows(q, mid)), 0.5)
    return ad.tmean(per_row)


def consistency_variant(p, p_tilde, metric: str = "jsd") -> Tensor:
    """Row-averaged distance between category distributions.

    ``l2`` is the squared Euclidean distance per row (summed over classes),
    ``kl`` is KL[p || p_tilde], ``jsd`` is :func:`jsd_consistency`.
    """
    p, q = _as_probs(p), _as_probs(p_tilde)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if metric == "jsd":
        return jsd_consistency(p, q)
    if metric == "kl":
        return ad.tmean(_kl_rows(p, q))
    if metric == "l2":
        d = ad.sub(p, q)
        return ad.tmean(ad.tsum(ad.mul(d, d), axis=-1))
    raise ValueError(f"unknown consistency metric {metric!r}; expected l2, kl or jsd")


def total_loss(parts: Mapping[str, Tensor], enabled: Mapping[str, bool] | None = None,
               weights: Mapping[str, float] | None = None) -> Tensor:
    """Weighted sum of the enabled loss terms; disabled terms add exactly 0."""
    total = Tensor(0.0)
    for name in LOSS_TERMS:
        if name not in parts:
            continue
        if enabled is not None and not enabled.get(name, True):
            continue
        w = 1.0 if weights is None else weights.get(name, 1.0)
        term = parts[name] if w == 1.0 else ad.scale(parts[name], w)
        total = ad.add(total, term)
    return total


def uniform_limit(gates, m: int) -> float:
    """Large-temperature value of :func:`info_nce_gated`: ``sum(gates) * log(m - 1)``."""
    return float(np.sum(gates)) * math.log(m - 1)
