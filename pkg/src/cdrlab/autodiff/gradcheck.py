from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .optim import ParamStore, forward_backward
from .tensor import Tensor, no_grad, trace_relu


def _eval(loss_fn):
    with no_grad(), trace_relu() as trace:
        val = float(loss_fn().data)
    return val, trace


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(loss_fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5,
               max_coords: int | None = 200, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Coordinates whose +/- perturbation flips any relu's activation pattern are
    skipped (the finite difference straddles a kink there). When
    ``max_coords`` is set, that many coordinates are sampled across all
    parameters; otherwise every coordinate is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    _, analytic = forward_backward(loss_fn, params)
    _, base_trace = _eval(loss_fn)
    coords = [(name, i) for name, t in params.items() for i in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp, tp = _eval(loss_fn)
        flat[i] = orig - eps
        fm, tm = _eval(loss_fn)
        flat[i] = orig
        if not (_same_pattern(tp, base_trace) and _same_pattern(tm, base_trace)):
            continue
        numeric = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
