"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vidial import tensor as T


def numeric_grad(f: Callable[[], T.Tensor], param: T.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to param."""
    base = param.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f().item()
        flat[i] = keep - h
        lo = f().item()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(
    build: Callable[[], T.Tensor],
    params: Sequence[T.Tensor],
    tape_loss: Callable[[], tuple[T.Tensor, T.GradientTape]] | None = None,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    h: float = 1e-5,
) -> float:
    """Compare taped gradients of ``build`` against central differences.

    ``build`` recomputes the scalar loss from the current parameter values.
    Returns the worst relative error seen, and asserts it below ``rtol``
    (entries whose numeric and analytic grads are both below ``atol`` are
    treated as matching, to avoid 0/0 blowups).
    """
    for p in params:
        p.zero_grad()
    with T.GradientTape() as tape:
        loss = build()
    T.backward(loss, tape)

    worst = 0.0
    for p in params:
        assert p.grad is not None, f"no gradient reached parameter of shape {p.shape}"
        num = numeric_grad(build, p, h=h)
        ana = p.grad
        denom = np.maximum(np.abs(num), np.abs(ana))
        err = np.abs(num - ana)
        rel = np.where(denom > atol, err / np.maximum(denom, 1e-300), 0.0)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
