"""Named parameter collections with content hashing and freezing."""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` map; insertion order fixes serialization order."""

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable, name=name)
        self[name] = t
        return t

    def trainable(self) -> list[Tensor]:
        return [t for t in self.values() if t.requires_grad]

    def freeze(self) -> str:
        for t in self.values():
            t.requires_grad = False
            t.grad = None
        return self.content_hash()

    def content_hash(self) -> str:
        return content_hash(self)

    def num_values(self) -> int:
        return sum(t.size for t in self.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.items())


def content_hash(arrays) -> str:
    h = hashlib.sha256()
    for name, t in arrays.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(np.asarray(data.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()


def normal_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Normal(0, 1/fan_in) initialization."""
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
