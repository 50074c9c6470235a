"""Shared test utilities that wrap package tensors around the naive oracles."""

from __future__ import annotations

import numpy as np

from facesr.tensor import Tensor

from oracles import grad_close, max_grad_err, numeric_grad


def check_gradients(build, arrays, rtol: float = 1e-3, atol: float = 2e-5,
                    h: float = 1e-3) -> None:
    """Assert analytic gradients of `build(*tensors) -> scalar Tensor` match
    central differences on every input array."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()

    # Plain (non-requires-grad) leaves build no graph, but functions whose
    # *value* contains an inner grad() still work, so no_grad is not used.
    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    for t, n in zip(tensors, numeric):
        assert t.grad is not None, "no gradient reached a requires_grad leaf"
        assert grad_close(t.grad, n, rtol, atol), (
            f"gradient mismatch, max rel err {max_grad_err(t.grad, n):.3e}")
