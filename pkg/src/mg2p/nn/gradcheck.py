from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class GradientError(ArithmeticError):
    pass


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` rebuilds the graph from the current contents of ``params`` on every
    call. With ``samples`` set, that many coordinates are drawn uniformly over
    all parameters; otherwise every coordinate is checked. Returns the maximum
    relative error.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient_check needs float64 parameters")
        p.requires_grad = True
        p.grad = None
    loss = f()
    loss.backward()
    analytic = []
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else np.array(p.grad, dtype=np.float64)
        if not np.isfinite(g).all():
            raise GradientError("non-finite analytic gradient")
        analytic.append(g.reshape(-1))

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            original = flat[j]
            flat[j] = original + eps
            up = f().item()
            flat[j] = original - eps
            down = f().item()
            flat[j] = original
            numeric = (up - down) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise GradientError(f"non-finite numerical gradient at param {i}, index {j}")
            worst = max(worst, relative_error(float(analytic[i][j]), numeric, floor))
    return worst
