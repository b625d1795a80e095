from typing import Callable, Sequence

import numpy as np

from fewvlm.nncore.tensor import Tensor, float64_mode


def numeric_gradient(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar `fn()` w.r.t. the values of `x`"""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5
) -> dict[str, float]:
    """
    Compare backward gradients of a scalar function against finite differences.

    The inputs must be float64 leaf tensors with requires_grad set; `fn` must
    rebuild the graph from them on every call. Run it under `float64_mode()`
    so intermediate constants are 64-bit too.

    Returns
    -------
    dict[str, float]
        Relative error per input, keyed by its name (or position).
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 inputs, got {x.data.dtype}")
        x.zero_grad()
    with float64_mode():
        out = fn()
        out.backward()
        errors = {}
        for i, x in enumerate(inputs):
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            numeric = numeric_gradient(fn, x, eps)
            errors[x.name or str(i)] = relative_error(analytic, numeric)
    return errors
