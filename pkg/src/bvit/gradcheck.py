"""Central finite-difference checks for the autograd engine (f64 only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two max magnitudes."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numerical_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], which: int,
                   h: float = 1e-5) -> np.ndarray:
    base = arrays[which]
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        args_p = list(arrays)
        args_p[which] = plus
        args_m = list(arrays)
        args_m[which] = minus
        flat[i] = (f(args_p) - f(args_m)) / (2.0 * h)
    return out


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Compare analytic and numeric gradients of scalar ``fn(*tensors)``.

    Every array becomes an f64 leaf with ``requires_grad``. Returns the worst
    :func:`relative_error` over all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()

    def f(args):
        with no_grad():
            return fn(*(Tensor(a) for a in args)).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numerical_grad(f, arrays, i, h)))
    return worst


def directional_check(loss: Callable[[], Tensor], params: dict[str, Tensor], rng: np.random.Generator,
                      h: float = 1e-5) -> float:
    """Finite-difference check of the gradient along one random direction.

    ``loss`` must read ``params`` each call; the values are perturbed in place
    and restored. Returns |d_analytic - d_numeric| / max(|d_analytic|, |d_numeric|).
    """
    for p in params.values():
        p.zero_grad()
    loss().backward()
    dirs = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    # unit-norm direction so the step along it is exactly h
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs.values()))
    dirs = {k: d / norm for k, d in dirs.items()}
    analytic = float(np.sum([np.sum(p.grad * dirs[k]) for k, p in params.items() if p.grad is not None]))

    originals = {k: p.data for k, p in params.items()}
    try:
        with no_grad():
            for k, p in params.items():
                p.data = originals[k] + h * dirs[k]
            up = loss().item()
            for k, p in params.items():
                p.data = originals[k] - h * dirs[k]
            down = loss().item()
    finally:
        for k, p in params.items():
            p.data = originals[k]
    numeric = (up - down) / (2.0 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
