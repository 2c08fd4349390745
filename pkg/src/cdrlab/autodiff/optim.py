from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


class ParamStore:
    """Named trainable tensors plus Adam moment buffers.

    Iteration order is insertion order, which fixes every reduction that
    walks the parameters.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ParamStore":
        out = ParamStore(self.values())
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.t = self.t
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def forward_backward(loss_fn: Callable[[], Tensor], params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` and return (loss, gradient for every parameter)."""
    params.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    return float(loss.data), grads


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, applied in place."""
    if lr <= 0 or eps <= 0 or not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError("adam_step: lr, eps must be positive and betas in (0, 1)")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    params.t += 1
    c1 = 1.0 - beta1**params.t
    c2 = 1.0 - beta2**params.t
    for name, t in params.items():
        g = grads[name]
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * (g * g)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
