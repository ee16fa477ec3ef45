"""Named parameter storage and the Adam update rule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradientError(KeyError):
    """A parameter was left without a gradient in an optimizer step."""


class ParameterStore:
    """Map of unique names to trainable tensors plus optimizer state.

    Iteration order is always lexicographic so that serialization and
    update loops are deterministic.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def create(self, name: str, shape, rng: np.random.Generator | None = None,
               init: str = "fanin_uniform") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "fanin_uniform":
            # fan-in-scaled uniform; fan-in is the contraction width
            fan_in = shape[0] if len(shape) <= 2 else int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            if rng is None:
                raise ValueError("fanin_uniform init needs an rng")
            data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def named_grads(self, gradmap: dict) -> dict[str, np.ndarray]:
        """Re-key a Tensor->grad map from ``backward`` by parameter name."""
        by_id = {id(t): n for n, t in self._params.items()}
        out = {}
        for tensor, grad in gradmap.items():
            name = by_id.get(id(tensor))
            if name is not None:
                out[name] = grad
        return out

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction, in place on the store.

    ``grads`` must cover every parameter in the store.
    """
    missing = [n for n in store.names() if n not in grads]
    if missing:
        raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing)}")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, param in store.items():
        g = np.asarray(grads[name], dtype=param.dtype)
        if g.shape != param.shape:
            raise MissingGradientError(f"gradient shape {g.shape} does not match {name} {param.shape}")
        m = store._m.get(name)
        v = store._v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store._m[name] = m
        store._v[name] = v
        mhat = m / c1
        vhat = v / c2
        param.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
