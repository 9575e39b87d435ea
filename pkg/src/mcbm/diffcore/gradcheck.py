"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    grad = np.empty_like(point)
    flat, gflat = point.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(point)
        flat[i] = orig - eps
        lo = f(point)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst-case relative error between backward() and central differences.

    ``function`` maps a Tensor to a scalar Tensor and must be deterministic.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    function(x).backward()
    analytic = np.zeros_like(point) if x.grad is None else x.grad

    def scalar(p: np.ndarray) -> float:
        return float(function(Tensor(p.copy())).data)

    numeric = numeric_gradient(scalar, point, eps)
    return float(relative_error(analytic, numeric, floor).max(initial=0.0))


def grad_check_params(
    loss_fn: Callable[[], Tensor], params: list, eps: float = 1e-5, floor: float = 1e-6
) -> float:
    """Same check over every coordinate of a list of parameters in place."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        base = p.data

        def scalar(values, p=p):
            p.data = values
            return float(loss_fn().data)

        numeric = numeric_gradient(scalar, base.copy(), eps)
        p.data = base
        worst = max(worst, float(relative_error(analytic, numeric, floor).max(initial=0.0)))
        p.grad = None
    return worst
