"""Central finite-difference verification of backward passes.

Runs in float64: analytic gradients from the tape are compared elementwise
against (f(x+h) - f(x-h)) / 2h with tolerance max(atol, rtol * |g|).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> None:
    """Assert that backward() matches central finite differences.

    ``fn`` may return any shape; a fixed random linear functional reduces the
    output to a scalar so the full Jacobian action is exercised.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")
    out = fn(*inputs)
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    loss = (out * w).sum()
    for t in inputs:
        t.zero_grad()
    backward(loss)

    def scalar_eval() -> float:
        with no_grad():
            return float((fn(*inputs).data * w.data).sum())

    for ti, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = scalar_eval()
            flat[j] = orig - eps
            down = scalar_eval()
            flat[j] = orig
            fd = (up - down) / (2 * eps)
            an = analytic.reshape(-1)[j]
            tol = max(atol, rtol * abs(an))
            if abs(an - fd) > tol:
                raise AssertionError(
                    f"gradient mismatch on input {ti} element {j}: "
                    f"analytic {an:.8e} vs finite-difference {fd:.8e} (tol {tol:.2e})"
                )
