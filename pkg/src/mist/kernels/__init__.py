"""Attention kernel backend selection.

The compiled Cython kernels are used when the extension built; setting
MIST_KERNELS=python forces the numpy fallback (MIST_KERNELS=compiled
errors if the extension is missing). Both backends share one stateless
interface:

    attention_forward(q, k, v, allowed, scale) -> out
    attention_backward(q, k, v, allowed, scale, d_out) -> (dq, dk, dv)

with q [R, Lq, d], k/v [R, Lk, d], allowed a bool/uint8 [Lq, Lk] matrix
shared across rows, and zero output rows where no key is allowed.
"""

import os

import numpy as np

from . import reference

_forced = os.environ.get("MIST_KERNELS", "").strip().lower()

if _forced in ("", "compiled"):
    try:
        from . import _attnkern as _impl
    except ImportError:
        if _forced == "compiled":
            raise ImportError("MIST_KERNELS=compiled but the extension is not built")
        _impl = reference
elif _forced == "python":
    _impl = reference
else:
    raise ValueError(f"MIST_KERNELS must be 'compiled' or 'python', got {_forced!r}")

BACKEND = _impl.BACKEND


def backend_name() -> str:
    """Which kernel implementation is active: 'compiled' or 'python'."""
    return BACKEND


def compiled_available() -> bool:
    try:
        from . import _attnkern  # noqa: F401
        return True
    except ImportError:
        return False


def get_backend(name: str):
    """Explicit backend module, for cross-checking and benchmarks."""
    if name == "python":
        return reference
    if name == "compiled":
        from . import _attnkern
        return _attnkern
    raise ValueError(f"unknown kernel backend {name!r}")


def _prep(q, k, v, allowed):
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v)
    allowed = np.ascontiguousarray(allowed, dtype=np.uint8)
    return q, k, v, allowed


def attention_forward(q, k, v, allowed, scale):
    q, k, v, allowed = _prep(q, k, v, allowed)
    if _impl is reference:
        return _impl.attention_forward(q, k, v, allowed.astype(bool), scale)
    return _impl.attention_forward(q, k, v, allowed, float(scale))


def attention_backward(q, k, v, allowed, scale, d_out):
    q, k, v, allowed = _prep(q, k, v, allowed)
    d_out = np.ascontiguousarray(d_out)
    if _impl is reference:
        return _impl.attention_backward(q, k, v, allowed.astype(bool), scale, d_out)
    return _impl.attention_backward(q, k, v, allowed, float(scale), d_out)
