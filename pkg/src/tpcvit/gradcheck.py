"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param`` entries (all, or the flat ``indices``)."""
    flat = param.data.reshape(-1)
    picked = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in picked:
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; zero when both vectors vanish."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0 else float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Relative error between tape gradients and central differences, one value per parameter.

    With ``max_entries`` only a seeded random subset of each parameter's entries is
    compared, which keeps checks on large weight matrices cheap.
    """
    for p in params:
        p.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    errors = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = numeric_grad(fn, p, step, idx).reshape(-1)[idx]
        errors.append(relative_error(np.ravel(analytic)[idx], numeric))
    return errors
