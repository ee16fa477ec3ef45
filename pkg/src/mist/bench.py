"""Attention cost benchmarks: key-visit accounting and wall time.

Key visits (admissible query/key pairs) are the size-independent cost
unit; the harness checks every measured count against the closed-form
expressions before timing anything. A second harness compares the
compiled kernels against the numpy fallback on identical workloads.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import MultiHeadParams, block_set_cross_attention, global_cross_attention
from .masks import BlockLayout, build_global_causal_mask, build_set_axis_causal_mask
from .optim import ParameterStore
from .tensor import Tensor


def global_key_visits(layout: BlockLayout, h: int, w: int) -> int:
    """Every noisy patch of block b sees all b*B*H*W earlier clean patches."""
    k, b = layout.n_blocks, layout.block_size
    return (b * h * w) ** 2 * (k * (k - 1) // 2)


def set_axis_key_visits(layout: BlockLayout, h: int, w: int) -> int:
    """Per location, image i sees block_of(i)*B earlier images."""
    k, b = layout.n_blocks, layout.block_size
    return h * w * b * b * (k * (k - 1) // 2)


@dataclass
class BenchRow:
    kind: str
    n_images: int
    block_size: int
    h: int
    w: int
    dim: int
    key_visits: int
    formula_visits: int
    median_ms: float

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "n": self.n_images, "b": self.block_size,
            "h": self.h, "w": self.w, "dim": self.dim,
            "key_visits": self.key_visits, "formula_visits": self.formula_visits,
            "median_ms": round(self.median_ms, 4),
        }


def _median_ms(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times))


def bench_cross_attention(n: int, block_size: int, h: int, w: int, dim: int = 32,
                          n_heads: int = 4, runs: int = 20, seed: int = 0) -> list[BenchRow]:
    """Measure both cross-attention variants on one layout.

    Returns two rows (global, set-axis); raises if a measured key-visit
    count disagrees with its formula.
    """
    layout = BlockLayout(n, block_size)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    params = MultiHeadParams.create(store, "bench", dim, n_heads, rng)
    z_n = Tensor(rng.normal(size=(1, n, h, w, dim)).astype(np.float32))
    z_c = Tensor(rng.normal(size=(1, n, h, w, dim)).astype(np.float32))

    rows = []
    for kind, mask_visits, formula, fn in (
        ("global", build_global_causal_mask(layout, h, w).key_visits(),
         global_key_visits(layout, h, w),
         lambda: global_cross_attention(z_n, z_c, layout, params)),
        ("set_axis", h * w * build_set_axis_causal_mask(layout).key_visits(),
         set_axis_key_visits(layout, h, w),
         lambda: block_set_cross_attention(z_n, z_c, layout, params)),
    ):
        if mask_visits != formula:
            raise AssertionError(
                f"{kind} visits {mask_visits} != formula {formula} for N={n} B={block_size} {h}x{w}")
        rows.append(BenchRow(kind, n, block_size, h, w, dim, mask_visits, formula,
                             _median_ms(fn, runs)))
    return rows


def random_grids(n_grids: int, rng: np.random.Generator, max_n: int = 8, max_hw: int = 8):
    """Random (N, B, H, W) layouts with B dividing N."""
    grids = []
    for _ in range(n_grids):
        n = int(rng.integers(1, max_n + 1))
        divisors = [b for b in range(1, n + 1) if n % b == 0]
        b = divisors[rng.integers(len(divisors))]
        h = int(rng.integers(1, max_hw + 1))
        w = int(rng.integers(1, max_hw + 1))
        grids.append((n, b, h, w))
    return grids


def verify_cost_model(n_grids: int = 20, seed: int = 0) -> int:
    """Check measured mask counts against formulas on random layouts."""
    rng = np.random.default_rng(seed)
    checked = 0
    for n, b, h, w in random_grids(n_grids, rng):
        layout = BlockLayout(n, b)
        if build_global_causal_mask(layout, h, w).key_visits() != global_key_visits(layout, h, w):
            raise AssertionError(f"global mismatch at N={n} B={b} {h}x{w}")
        if h * w * build_set_axis_causal_mask(layout).key_visits() != set_axis_key_visits(layout, h, w):
            raise AssertionError(f"set-axis mismatch at N={n} B={b} {h}x{w}")
        checked += 1
    return checked


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    dicts = [r.as_dict() for r in rows]
    writer = csv.DictWriter(buf, fieldnames=list(dicts[0].keys()))
    writer.writeheader()
    writer.writerows(dicts)
    return buf.getvalue()


def bench_kernel_backends(seq_len: int = 256, dim: int = 32, rows: int = 4,
                          runs: int = 10, seed: int = 0) -> list[dict]:
    """Compare compiled vs python kernels on one masked-attention workload."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(rows, seq_len, dim)).astype(np.float32)
    k = rng.normal(size=(rows, seq_len, dim)).astype(np.float32)
    v = rng.normal(size=(rows, seq_len, dim)).astype(np.float32)
    # block-causal mask, half the pairs admissible on average
    blk = np.arange(seq_len) // max(seq_len // 8, 1)
    allowed = blk[None, :] < blk[:, None]
    g = rng.normal(size=(rows, seq_len, dim)).astype(np.float32)

    backends = ["python"]
    if kernels.compiled_available():
        backends.insert(0, "compiled")
    out = []
    for name in backends:
        impl = kernels.get_backend(name)
        am = allowed.astype(np.uint8) if name == "compiled" else allowed
        fwd = _median_ms(lambda: impl.attention_forward(q, k, v, am, 0.17), runs)
        bwd = _median_ms(lambda: impl.attention_backward(q, k, v, am, 0.17, g), runs)
        out.append({"backend": name, "seq_len": seq_len, "dim": dim, "rows": rows,
                    "forward_ms": round(fwd, 4), "backward_ms": round(bwd, 4)})
    return out
