"""Splittable deterministic random state."""

from __future__ import annotations

import zlib
from typing import Any, Sequence

import numpy as np

from crowd_mlp.engine.tensor import DimensionError, ParameterError


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ParameterError(f"RNG derivation keys must be non-negative, got {key}")
    return int(key)


class RngState:
    """PCG64 generator addressed by (seed, key path).

    ``derive`` returns an independent child stream for any key path without consuming
    draws from the parent, so per-sample or per-epoch streams do not depend on call order.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()) -> None:
        if seed < 0:
            raise ParameterError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *keys: int | str) -> RngState:
        return RngState(self.seed, self.spawn_key + tuple(_key_to_int(k) for k in keys))

    def random(self, shape: int | tuple[int, ...]) -> np.ndarray:
        return self.generator.random(shape)

    def uniform(self, low: float, high: float, size: Any = None) -> Any:
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Any = None) -> Any:
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size: Any = None) -> Any:
        """Uniform integers on the closed interval [low, high]."""
        return self.generator.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "bit_generator": self.generator.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> RngState:
        rng = cls(int(state["seed"]), tuple(int(k) for k in state.get("spawn_key", ())))
        if "bit_generator" in state:
            rng.generator.bit_generator.state = state["bit_generator"]
        return rng


class StackedRng:
    """Draws one leading-axis slice per row, each from its own RngState.

    Every call restarts the row streams, so repeated draws of one shape agree. This keeps
    a per-example mask fixed across the passes that share it.
    """

    def __init__(self, rows: Sequence[RngState]) -> None:
        self.rows = list(rows)

    def random(self, shape: tuple[int, ...]) -> np.ndarray:
        if not shape or shape[0] != len(self.rows):
            raise DimensionError(
                f"StackedRng holds {len(self.rows)} rows, asked for shape {shape}"
            )
        return np.stack([row.derive().random(tuple(shape[1:])) for row in self.rows])

    def derive(self, *keys: int | str) -> StackedRng:
        return StackedRng([row.derive(*keys) for row in self.rows])
