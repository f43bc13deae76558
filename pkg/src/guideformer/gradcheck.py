"""Finite-difference verification of taped gradients.

Central differences in float64 against the analytic reverse-mode result.
Relative error per coordinate uses max(|analytic|, |numeric|, floor) as the
denominator so that near-zero entries compare absolutely.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar f at x.

    f maps a raw float64 array to a python float. When ``coords`` is given
    only those flat indices are probed (the rest stay zero) -- used for
    spot-checking large parameter sets.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        keep = flat[i]
        flat[i] = keep + eps
        up = f(x)
        flat[i] = keep - eps
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def analytic_grad(f, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of scalar-valued f at x via the tape."""
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    backward(out)
    return t.grad


def max_rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> float:
    """Worst per-coordinate relative discrepancy between two gradients."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(build, x: np.ndarray, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Compare taped vs numeric gradients of ``build`` at ``x``.

    ``build`` maps a Tensor to a scalar Tensor; the same construction is
    reused for the numeric probe by wrapping raw arrays. Returns the worst
    relative error.
    """
    a = analytic_grad(build, x)

    def scalar(arr):
        return build(Tensor(arr)).item()

    n = numeric_grad(scalar, np.asarray(x, dtype=np.float64), eps=eps)
    return max_rel_error(a, n, floor=floor)


def check_param_gradients(loss_fn, params: dict[str, Tensor], sample: int | None = None,
                          eps: float = 1e-5, floor: float = 1e-8, seed: int = 0) -> float:
    """End-to-end check over a dict of named parameters.

    ``loss_fn()`` closes over ``params`` and returns a scalar Tensor. For
    every parameter (or a seeded random subset of ``sample`` coordinates per
    parameter) the taped gradient is compared against central differences.
    Returns the worst relative error seen.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    taped = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if sample is None or flat.size <= sample:
            coords = range(flat.size)
        else:
            coords = sorted(rng.choice(flat.size, size=sample, replace=False).tolist())
        tflat = taped[name].reshape(-1)
        for i in coords:
            keep = flat[i]
            with no_grad():
                flat[i] = keep + eps
                up = loss_fn().item()
                flat[i] = keep - eps
                down = loss_fn().item()
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            ana = tflat[i]
            denom = max(abs(num), abs(ana), floor)
            worst = max(worst, abs(num - ana) / denom)
    return worst
