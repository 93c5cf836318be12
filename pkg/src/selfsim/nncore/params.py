"""Named parameter storage with paired gradient and Adam moment arrays."""

from __future__ import annotations

import numpy as np


class ParamEntry:
    """One trainable array plus its gradient and optimizer state."""

    __slots__ = ("value", "grad", "m", "v", "step")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step = 0


class ParamStore:
    """Flat, ordered collection of named parameter entries."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray) -> ParamEntry:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        entry = ParamEntry(np.ascontiguousarray(value, dtype=self.dtype))
        self._entries[name] = entry
        return entry

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            entry.grad[...] = 0

    def n_parameters(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another dtype (moments and steps carried over)."""
        out = ParamStore(dtype)
        for name, entry in self._entries.items():
            new = out.add(name, entry.value.astype(dtype))
            new.grad = entry.grad.astype(dtype)
            new.m = entry.m.astype(dtype)
            new.v = entry.v.astype(dtype)
            new.step = entry.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over every entry; gradients are zeroed afterward."""
    for entry in params._entries.values():
        entry.step += 1
        g = entry.grad
        entry.m += (1.0 - beta1) * (g - entry.m)
        entry.v += (1.0 - beta2) * (g * g - entry.v)
        m_hat = entry.m / (1.0 - beta1 ** entry.step)
        v_hat = entry.v / (1.0 - beta2 ** entry.step)
        entry.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        g[...] = 0
