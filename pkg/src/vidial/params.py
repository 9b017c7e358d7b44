"""Named registry of trainable tensors.

Parameters are created in a fixed order from a seeded generator, so a given
(config, seed) pair always produces bit-identical values. Names are dotted
paths ("decoder.block0.self.key_proj") used for checkpoint round trips.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


class ParameterSet:
    """Insertion-ordered name->Tensor map with fan-based initialization."""

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._params: dict[str, T.Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> T.Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        t = T.Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def matrix(self, name: str, rows: int, cols: int) -> T.Tensor:
        """Weight matrix drawn uniform in +-sqrt(6/(rows+cols))."""
        bound = math.sqrt(6.0 / (rows + cols))
        return self._register(name, self._rng.uniform(-bound, bound, size=(rows, cols)))

    def zeros(self, name: str, *shape: int) -> T.Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> T.Tensor:
        return self._register(name, np.ones(shape))

    def __getitem__(self, name: str) -> T.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[T.Tensor]:
        return list(self._params.values())

    def count_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(
                f"parameter names disagree (missing: {sorted(missing)[:3]}, extra: {sorted(extra)[:3]})"
            )
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
            t.data[...] = arr
