"""Named parameter and buffer registry shared by every model component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crowd_mlp.engine.ops import batch_norm, linear
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` table plus ``name -> ndarray`` buffers (running statistics)."""

    def __init__(self, rng: RngState, *, renorm: tuple[float, float] | None = None) -> None:
        self._rng = rng
        self.renorm = renorm
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def kaiming(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        std = np.sqrt(2.0 / max(fan_in, 1))
        data = self._rng.derive(name).normal(0.0, std, shape)
        return self._add(name, data)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.ones(shape))

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise KeyError(f"Duplicate buffer name: {name}")
        self.buffers[name] = np.asarray(data, dtype=np.float64).copy()
        return self.buffers[name]

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"Duplicate parameter name: {name}")
        tensor = Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    renorm: tuple[float, float] | None = None

    @classmethod
    def create(cls, store: ParamStore, prefix: str, features: int) -> BatchNormParams:
        return cls(
            gamma=store.ones(f"{prefix}.gamma", (features,)),
            beta=store.zeros(f"{prefix}.beta", (features,)),
            running_mean=store.buffer(f"{prefix}.running_mean", np.zeros(features)),
            running_var=store.buffer(f"{prefix}.running_var", np.ones(features)),
            renorm=store.renorm,
        )

    def __call__(self, x: Tensor, mode: str, *, axis: int = -1) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode,
            axis=axis,
            renorm=self.renorm,
        )


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d_in: int, d_out: int) -> DenseParams:
        return cls(
            weight=store.kaiming(f"{prefix}.weight", (d_in, d_out), fan_in=d_in),
            bias=store.zeros(f"{prefix}.bias", (d_out,)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
