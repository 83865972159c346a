"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish exactly (for example a key bias
    under softmax shift invariance) from turning difference noise into a
    ratio of one.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numerical_grad(
    fn: Callable[[], float],
    arr: np.ndarray,
    step: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * step)
    return out


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the graph from ``tensors`` on each call and return a
    scalar.  With ``max_coords`` only that many randomly chosen entries per
    tensor are differenced.  Gradient norms below ``1e-3 * max(1, |f|)`` are
    treated as zero, since difference noise scales with ``|f|``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = fn()
    floor = 1e-3 * max(1.0, abs(float(loss.data)))
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = rng.choice(t.data.size, size=max_coords, replace=False)
        numeric = numerical_grad(lambda: float(fn().data), t.data, step, coords)
        a = analytic.reshape(-1) if coords is None else analytic.reshape(-1)[coords]
        worst = max(worst, relative_error(a, numeric, floor))
    return worst
