"""Dense float32 tensors with a stable buffer identity."""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

_buffer_ids = itertools.count(1)


class Tensor:
    """A row-major float32 array plus the identity of the buffer holding it.

    ``buffer_id`` is assigned once at allocation and survives every in-place
    write; captured graphs bind to it, never to the values.
    """

    __slots__ = ("data", "buffer_id", "name")

    def __init__(self, data: np.ndarray, name: str = ""):
        if data.dtype != np.float32:
            raise TypeError(f"Tensor data must be float32, got {data.dtype}")
        if any(d <= 0 for d in data.shape):
            raise ValueError(f"dimensions must be positive, got {data.shape}")
        self.data = data
        self.buffer_id = next(_buffer_ids)
        self.name = name

    @classmethod
    def zeros(cls, shape: Sequence[int], name: str = "") -> Tensor:
        return cls(np.zeros(tuple(shape), dtype=np.float32), name)

    @classmethod
    def from_values(cls, values, name: str = "") -> Tensor:
        return cls(np.array(values, dtype=np.float32), name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def row(self, i: int, name: str = "") -> Tensor:
        """A ``[1, cols]`` tensor aliasing row ``i``; it gets its own buffer id."""
        return Tensor(self.data[i : i + 1], name or f"{self.name}[{i}]")

    def reshape_(self, shape: Sequence[int]) -> None:
        """Reinterpret the buffer under a new shape; identity is preserved."""
        shape = tuple(shape)
        if math.prod(shape) != self.data.size:
            raise ValueError(f"cannot view {self.data.size} elements as {shape}")
        self.data = self.data.reshape(shape)

    def copy_(self, values) -> None:
        self.data[...] = values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(#{self.buffer_id}{label}, shape={list(self.shape)})"
