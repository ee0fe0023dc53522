"""Gradient-routing primitives: gradient reversal and stop-gradient.

The whole model is built on torch autograd; a differentiable value is a
``torch.Tensor`` (``.data`` holds the forward value, ``.grad`` is filled by
the backward pass).  The two primitives below are graph nodes that are the
identity in the forward direction and rewrite gradients in the backward
direction.  Adversarial branches sit behind ``gradient_reverse``; the
context sub-network taps sit behind ``stop_gradient``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


class GradRoutingError(ValueError):
    """Invalid routing policy or primitive argument."""


class OracleError(RuntimeError):
    """A numerical test oracle hit a non-finite evaluation."""


@dataclass(frozen=True)
class GradRoutingPolicy:
    """How gradients are routed between the detection and context networks.

    grl_scale: strength of the gradient reversal (forward identity, backward
        multiplies by ``-grl_scale``).  Must be positive whenever an
        adversarial branch is active.
    detach_enabled: whether the context sub-network reads the backbone taps
        through stop-gradient (no gradient ever reaches the backbone through
        the taps).
    adversarial_context: whether the context half of the instance-context
        classifier input also passes through the reversal node.  When False
        the context network receives the un-reversed alignment gradient.
    """

    grl_scale: float = 1.0
    detach_enabled: bool = True
    adversarial_context: bool = True

    def validate(self, adversarial_active: bool = True) -> None:
        if self.grl_scale < 0:
            raise GradRoutingError(f"grl_scale must be >= 0, got {self.grl_scale}")
        if adversarial_active and self.grl_scale <= 0:
            raise GradRoutingError(
                "grl_scale must be > 0 while an adversarial branch is active"
            )


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def gradient_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity in forward; multiplies the backward gradient by ``-scale``."""
    if scale < 0:
        raise GradRoutingError(f"gradient reversal scale must be >= 0, got {scale}")
    return _GradReverse.apply(x, float(scale))


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity in forward; blocks all gradient flow to nodes upstream of x."""
    return x.detach()


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Independent oracle used by the test suite to check analytic/autograd
    gradients; evaluates ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per
    coordinate in float64.
    """
    if h <= 0:
        raise GradRoutingError(f"finite-difference step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(
                f"non-finite evaluation at coordinate {i}: f(x+h)={fp}, f(x-h)={fm}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
