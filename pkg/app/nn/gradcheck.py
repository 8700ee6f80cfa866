"""
Central finite-difference verification of the analytic gradients.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, Field

from app.nn.losses import loss_and_grad
from app.nn.network import INPUT, NetworkSpec, Params, backward, forward

# Below this magnitude both gradients are compared absolutely.
_SCALE_FLOOR = 1e-6


class GradCheckReport(BaseModel):
    max_relative_error: dict[str, float] = Field(default_factory=dict, description="Per tensor, e.g. 'conv1.W'")
    tolerance: float
    passed: bool


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _SCALE_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradient_check(
    net: NetworkSpec,
    params: Params,
    inputs: np.ndarray,
    targets: np.ndarray,
    eps: float = 1e-5,
    tol: float = 1e-4,
    class_weights=None,
    check_input: bool = False,
) -> GradCheckReport:
    """
    Compares backprop gradients of the network's loss against central
    differences for every component of every non-frozen parameter tensor
    (and of the input when `check_input`). A network with nothing to check
    passes vacuously.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    inputs = np.array(inputs, dtype=np.float64)

    def loss_at(p: Params, x: np.ndarray) -> float:
        out, _ = forward(net, p, x)
        return loss_and_grad(net.loss, out, targets, class_weights)[0]

    out, cache = forward(net, params, inputs)
    _, grad = loss_and_grad(net.loss, out, targets, class_weights)
    analytic = backward(net, params, cache, grad, want_input_grad=check_input)

    errors: dict[str, float] = {}
    for name, tensors in analytic.params.items():
        for key, g in tensors.items():
            theta = params[name][key]
            numeric = np.zeros_like(theta)
            for i in np.ndindex(theta.shape):
                original = theta[i]
                theta[i] = original + eps
                plus = loss_at(params, inputs)
                theta[i] = original - eps
                minus = loss_at(params, inputs)
                theta[i] = original
                numeric[i] = (plus - minus) / (2 * eps)
            errors[f"{name}.{key}"] = _relative_error(g, numeric)

    if check_input:
        numeric = np.zeros_like(inputs)
        for i in np.ndindex(inputs.shape):
            original = inputs[i]
            inputs[i] = original + eps
            plus = loss_at(params, inputs)
            inputs[i] = original - eps
            minus = loss_at(params, inputs)
            inputs[i] = original
            numeric[i] = (plus - minus) / (2 * eps)
        errors[INPUT] = _relative_error(analytic.input, numeric)

    return GradCheckReport(
        max_relative_error=errors,
        tolerance=tol,
        passed=all(e <= tol for e in errors.values()),
    )
