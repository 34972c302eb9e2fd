"""Central finite-difference checks of autograd gradients (float64)."""

from typing import Callable, Dict, Iterable, Tuple

import torch

# Denominator floor for relative error; keeps exact zeros from dividing by ~0.
REL_FLOOR = 1e-4


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| / max(|a|, |n|, REL_FLOOR) over all elements."""
    if analytic.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, REL_FLOOR))
    return float(((analytic - numeric).abs() / denom).max())


def numeric_gradient(
    loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Central differences of loss_fn() with respect to every element of tensor.

    The tensor is perturbed in place and restored afterwards.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            plus = float(loss_fn())
            flat[i] = old - eps
            minus = float(loss_fn())
            flat[i] = old
            out[i] = (plus - minus) / (2.0 * eps)
    return grad


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    named_tensors: Iterable[Tuple[str, torch.Tensor]],
    eps: float = 1e-5,
) -> Dict[str, float]:
    """Relative error between autograd and finite differences, per tensor.

    Args:
        loss_fn: Recomputes a scalar loss from the current tensor values.
        named_tensors: (name, tensor) pairs; each must require grad.
        eps: Finite-difference step.

    Returns:
        {name: max relative error}.
    """
    named = list(named_tensors)
    for _, t in named:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    tensors = [t for _, t in named]
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    errors = {}
    for (name, t), a in zip(named, analytic):
        a = torch.zeros_like(t) if a is None else a.detach()
        errors[name] = relative_error(a, numeric_gradient(loss_fn, t, eps))
    return errors
