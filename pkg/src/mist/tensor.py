"""Dense multi-dimensional tensors with reverse-mode autodiff.

Tensors wrap row-major contiguous numpy buffers (float32 or float64).
Forward operations optionally record themselves on an active ``Tape``;
``backward`` replays the tape in reverse to accumulate gradients for
every ``requires_grad`` leaf.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes are incompatible."""


class GraphError(RuntimeError):
    """Raised on backward over a detached or non-scalar loss."""


def mask_sentinel(dtype) -> float:
    """Finite stand-in for -inf used in additive attention biases.

    The most negative finite value of the dtype absorbs any realistic
    score under addition while keeping max-subtraction NaN-free.
    """
    return float(np.finfo(np.dtype(dtype)).min)


def _mask_threshold(dtype) -> float:
    # Anything at or below this is treated as a masked (-inf) bias entry.
    return float(np.finfo(np.dtype(dtype)).min) / 4.0


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of forward operations for one reverse sweep.

    Use as a context manager; operations executed inside the block whose
    inputs are tracked get appended in execution order, which is already
    a topological order of the graph.
    """

    def __init__(self):
        self._records = []  # (out Tensor, parent Tensors, backward fn)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A numpy-backed tensor that can participate in autodiff.

    ``requires_grad`` marks leaves (parameters, probed inputs); tensors
    produced by recorded ops are tracked internally via ``_tracked``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, (np.ndarray, np.generic)) or arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        # keep 0-d arrays 0-d; ascontiguousarray would promote them to 1-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; implementations below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tracked


def apply_op(out_data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward`` maps the output gradient (ndarray) to one gradient
    ndarray (or None) per parent. Custom primitives (attention kernels,
    convolution) plug into autodiff through this hook.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_is_tracked(p) for p in parents):
        out._tracked = True
        tape._records.append((out, tuple(parents), backward))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}; cast explicitly")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b, "div")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return apply_op(ad / bd, (a, b), backward)


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return apply_op(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch dims broadcast; inner dims must agree.
    """
    a, b = _coerce_pair(a, b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op(np.matmul(ad, bd), (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return apply_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return apply_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def reshape_permute(a: Tensor, new_shape, axis_order) -> Tensor:
    """Reshape then permute axes in one recorded op.

    Equivalent to ``transpose(reshape(a, new_shape), axis_order)``; the
    round trip through the inverse order and original shape is bit-exact
    because only the index layout moves.
    """
    new_shape = tuple(new_shape)
    axis_order = tuple(axis_order)
    if int(np.prod(a.shape, dtype=np.int64)) != int(np.prod(new_shape, dtype=np.int64)):
        raise ShapeError(f"reshape_permute element count mismatch: {a.shape} -> {new_shape}")
    if sorted(axis_order) != list(range(len(new_shape))):
        raise ShapeError(f"axis_order {axis_order} is not a permutation of rank {len(new_shape)}")
    old = a.shape
    inv = tuple(np.argsort(axis_order))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)).reshape(old),)

    out = np.ascontiguousarray(a.data.reshape(new_shape).transpose(axis_order))
    return apply_op(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    dt = tensors[0].dtype
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(outs)

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)
    full_shape = a.shape

    def backward(g):
        buf = np.zeros(full_shape, dtype=g.dtype)
        buf[slicer] = g
        return (buf,)

    return apply_op(np.ascontiguousarray(a.data[slicer]), (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(g.dtype, copy=True),)

    return apply_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).astype(g.dtype, copy=True),)

    return apply_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * out_data),)

    return apply_op(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return apply_op(out_data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the denoiser."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    ad = a.data

    def backward(g):
        return (g * sig * (1.0 + ad * (1.0 - sig)),)

    return apply_op(ad * sig, (a,), backward)


def masked_softmax_lastdim(a: Tensor, bias) -> Tensor:
    """Softmax over the last axis of ``a + bias`` with stable masking.

    ``bias`` holds 0 for admissible keys and the finite -inf sentinel for
    masked ones; masked entries underflow to exact zero weight. Rows whose
    bias is entirely masked produce all-zero rows (empty-key convention).
    """
    bias_arr = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    # identify masked entries in the bias's own dtype, then re-emit the
    # sentinel in the data dtype so casting cannot weaken the mask
    masked = bias_arr <= _mask_threshold(bias_arr.dtype)
    bias_arr = np.where(masked, np.asarray(mask_sentinel(a.dtype), dtype=a.dtype),
                        bias_arr.astype(a.dtype, copy=False))
    shifted = a.data + bias_arr
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    dead = masked.all(axis=-1, keepdims=True)
    if dead.any():
        p = np.where(np.broadcast_to(dead, p.shape), np.asarray(0, dtype=p.dtype), p)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return apply_op(p, (a,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 2D convolution via im2col.

    ``x``: [B, Cin, H, W]; ``w``: [Cout, Cin, kh, kw]; ``b``: [Cout].
    """
    _check_same_dtype(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    cout, cin, kh, kw = wd.shape
    cols = _im2col(xd, kh, kw, padding)  # [B, Ho*Wo, Cin*kh*kw]
    bsz = xd.shape[0]
    ho = xd.shape[2] + 2 * padding - kh + 1
    wo = xd.shape[3] + 2 * padding - kw + 1
    flat = cols @ wd.reshape(cout, -1).T + b.data
    out_data = np.ascontiguousarray(flat.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bsz, ho * wo, cout)
        gb = g2.sum(axis=(0, 1))
        gw = np.einsum("bio,bik->ok", g2, cols).reshape(wd.shape)
        # full correlation of the output grad with spatially flipped,
        # channel-swapped weights recovers the input grad for stride 1
        wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gcols = _im2col(g, kh, kw, kh - 1 - padding)
        gx = (gcols @ wflip.reshape(cin, -1).T).reshape(bsz, xd.shape[2], xd.shape[3], cin)
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb

    return apply_op(out_data, (x, w, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # [B, C, Ho, Wo, kh, kw] -> [B, Ho*Wo, C*kh*kw]
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, c * kh * kw)


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling, the downsampling step between levels."""
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {a.shape}")

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up / 4.0,)

    out = a.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return apply_op(out, (a,), backward)


def upsample_nearest2(a: Tensor) -> Tensor:
    b, c, h, w = a.shape

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return apply_op(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3), (a,), backward)


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse sweep: gradients of a scalar loss for all reachable leaves.

    Returns a map from leaf Tensor to its gradient array and also stores
    it on ``leaf.grad``.
    """
    if loss.data.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(rec[0]): i for i, rec in enumerate(tape._records)}
    if id(loss) not in produced:
        raise GraphError("loss is not recorded on this tape (detached graph)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not _is_tracked(p):
                continue
            if pg.shape != p.shape:
                raise GraphError(f"gradient shape {pg.shape} does not match tensor shape {p.shape}")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
            if p.requires_grad and id(p) not in produced:
                leaves[id(p)] = p

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.ascontiguousarray(g)
        leaf.grad = g
        result[leaf] = g
    return result
