"""Adam, the multi-step learning-rate schedule and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from crowd_mlp.engine.tensor import ContractError, DimensionError, Tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, params: Mapping[str, Tensor]) -> AdamState:
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing[:3]}")
    for name, param in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        if grads[name].shape != param.shape or state.m[name].shape != param.shape:
            raise DimensionError(f"adam_step: shape mismatch for {name}")

    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def multistep_lr(epoch: int, base_lr: float, milestones: Sequence[int], gamma: float) -> float:
    """MultiStep schedule: base_lr · gamma^(number of milestones <= epoch)."""
    passed = sum(1 for milestone in milestones if epoch >= milestone)
    return base_lr * gamma**passed


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale every gradient in place so the global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total
