"""Pure-numpy masked attention kernels.

Fallback used when the compiled extension is unavailable (or forced via
MIST_KERNELS=python). Signatures and semantics match the compiled
module: both are stateless, recompute weights in the backward pass, and
give masked keys exactly zero weight so empty rows yield zero vectors.
"""

import numpy as np

BACKEND = "python"


def attention_forward(q, k, v, allowed, scale):
    """softmax(scale * q @ k^T, over allowed keys) @ v.

    q: [R, Lq, d]; k, v: [R, Lk, d]; allowed: bool [Lq, Lk] shared
    across rows. Rows with no allowed key return zeros.
    """
    p = _weights(q, k, allowed, scale)
    return p @ v


def attention_backward(q, k, v, allowed, scale, d_out):
    """Gradients (dq, dk, dv) of attention_forward; recomputes weights."""
    p = _weights(q, k, allowed, scale)
    dv = np.swapaxes(p, -1, -2) @ d_out
    dp = d_out @ np.swapaxes(v, -1, -2)
    inner = (dp * p).sum(axis=-1, keepdims=True)
    ds = p * (dp - inner)
    dq = (ds @ k) * np.asarray(scale, dtype=q.dtype)
    dk = (np.swapaxes(ds, -1, -2) @ q) * np.asarray(scale, dtype=q.dtype)
    return dq, dk, dv


def _weights(q, k, allowed, scale):
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * np.asarray(scale, dtype=q.dtype)
    neg = np.asarray(np.finfo(q.dtype).min, dtype=q.dtype)
    scores = np.where(allowed, scores, neg)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(allowed, e, np.asarray(0, dtype=q.dtype))
    s = e.sum(axis=-1, keepdims=True)
    dead_row = ~allowed.any(axis=-1)
    if dead_row.any():
        s = np.where(dead_row[..., None], np.asarray(1, dtype=q.dtype), s)
    return e / s
