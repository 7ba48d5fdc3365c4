from __future__ import annotations

import numpy as np

from petlsv.numcore.tensor import Tensor


class ParamGroup:
    """A named parameter tensor.

    ``trainable`` is the only switch the optimizer looks at; it is mirrored
    onto ``tensor.requires_grad`` so frozen weights never enter the tape.
    """

    __slots__ = ("name", "tensor", "_trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.tensor.name = name
        self.trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool):
        self._trainable = bool(value)
        self.tensor.requires_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def count(self) -> int:
        return int(self.tensor.data.size)

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"ParamGroup({self.name!r}, shape={self.tensor.shape}, {flag})"


def census(groups) -> int:
    return sum(g.count for g in groups)


def check_unique(groups):
    seen = set()
    for g in groups:
        if g.name in seen:
            raise ValueError(f"duplicate parameter name {g.name!r}")
        seen.add(g.name)
