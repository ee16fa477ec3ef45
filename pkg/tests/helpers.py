"""Shared test oracles: finite differences and naive attention."""

import numpy as np

from mist.tensor import Tape, backward


def numerical_grad(build_loss, leaf, h=1e-4):
    """Central finite differences of build_loss() w.r.t. one leaf tensor."""
    num = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    nflat = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = build_loss().item()
        flat[i] = orig - h
        lm = build_loss().item()
        flat[i] = orig
        nflat[i] = (lp - lm) / (2.0 * h)
    return num


def finite_diff_check(build_loss, leaves, h=1e-4, rtol=1e-4):
    """Assert analytic gradients match central differences for every leaf.

    Returns the worst relative error seen. Leaves should be float64 for
    the stated tolerance to be meaningful.
    """
    with Tape() as tape:
        loss = build_loss()
    grads = backward(loss, tape)
    worst = 0.0
    for leaf in leaves:
        assert leaf in grads, "leaf missing from gradient map"
        ana = grads[leaf]
        num = numerical_grad(build_loss, leaf, h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-4)
        rel = np.abs(ana - num) / denom
        worst = max(worst, float(rel.max()))
    assert worst <= rtol, f"max relative gradient error {worst:.3e} exceeds {rtol}"
    return worst


def naive_attention(q, k, v, allowed, scale):
    """Per-row softmax attention written as explicit loops."""
    r, lq, d = q.shape
    lk = k.shape[1]
    out = np.zeros((r, lq, d), dtype=np.float64)
    for ri in range(r):
        for i in range(lq):
            idx = [j for j in range(lk) if allowed[i, j]]
            if not idx:
                continue
            scores = np.array([float(np.dot(q[ri, i], k[ri, j])) * scale for j in idx])
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            for wj, j in zip(w, idx):
                out[ri, i] += wj * v[ri, j]
    return out.astype(q.dtype)


def naive_multi_head(zq, zk, zv, allowed, wq, wk, wv, wo, n_heads):
    """Loop-per-head oracle for multi_head_attention."""
    b, lq, c = zq.shape
    d = c // n_heads
    scale = 1.0 / np.sqrt(d)
    q = zq @ wq
    k = zk @ wk
    v = zv @ wv
    merged = np.zeros((b, lq, c), dtype=np.float64)
    for bi in range(b):
        for hi in range(n_heads):
            sl = slice(hi * d, (hi + 1) * d)
            out_h = naive_attention(q[bi : bi + 1, :, sl].astype(np.float64),
                                    k[bi : bi + 1, :, sl].astype(np.float64),
                                    v[bi : bi + 1, :, sl].astype(np.float64),
                                    allowed, scale)
            merged[bi, :, sl] = out_h[0]
    return (merged @ wo).astype(zq.dtype)
