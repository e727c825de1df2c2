"""Central finite-difference gradient oracle shared by the model tests."""

import numpy as np

from traffic_moe import autodiff as ad


def numeric_grad(fn, param: ad.Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued fn with respect to one tensor."""
    base = param.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        param.data = flat.reshape(base.shape)
        hi = fn()
        flat[i] = orig - eps
        param.data = flat.reshape(base.shape)
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    param.data = base
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, params: dict[str, ad.Tensor], eps: float = 1e-5) -> float:
    """Compare backward() grads against finite differences; return worst error.

    ``build_loss`` must construct the graph from the current parameter values
    and return the scalar loss tensor.
    """
    loss = build_loss()
    ad.zero_grads(params.values())
    ad.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        num = numeric_grad(lambda: build_loss().item(), p, eps=eps)
        worst = max(worst, max_rel_error(analytic[name], num))
    return worst
