"""Named, ordered parameter registry."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .tensor import Tensor, default_dtype


class ParameterStore:
    """Maps stable string ids to trainable tensors.

    Registering an id twice returns the tensor created the first time, so
    every consumer that asks for ``"kcm.w_theta"`` reads the same buffer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, pid: str, init: Callable[[], np.ndarray]) -> Tensor:
        if pid in self._params:
            return self._params[pid]
        t = Tensor(init(), requires_grad=True, name=pid, dtype=default_dtype())
        self._params[pid] = t
        return t

    def add(self, pid: str, tensor: Tensor) -> Tensor:
        if pid in self._params:
            raise KeyError(f"parameter {pid!r} already registered")
        tensor.requires_grad = True
        tensor.name = pid
        self._params[pid] = tensor
        return tensor

    def __getitem__(self, pid: str) -> Tensor:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def ids(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        for pid, t in self._params.items():
            if pid not in values:
                if strict:
                    raise KeyError(f"missing parameter {pid!r}")
                continue
            arr = np.asarray(values[pid])
            if arr.shape != t.shape:
                raise ValueError(f"{pid}: shape {arr.shape} does not match {t.shape}")
            # in place, so handles held elsewhere see the new values
            t.data[...] = arr

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)


def uniform_init(rng: np.random.Generator, shape, bound: float) -> Callable[[], np.ndarray]:
    return lambda: rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape, std: float) -> Callable[[], np.ndarray]:
    return lambda: rng.normal(0.0, std, size=shape)
