"""Named learnable tensors with Adam state."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor


@dataclass
class Param:
    value: Tensor
    adam_m: np.ndarray
    adam_v: np.ndarray

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


class ParamStore:
    """Ordered name -> parameter map.  Iteration follows insertion order."""

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        data = np.array(data, copy=True)
        t = Tensor(data, requires_grad=True, name=name)
        self._entries[name] = Param(t, np.zeros_like(data), np.zeros_like(data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name].value
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._entries.items())

    def size(self) -> int:
        """Total number of learnable scalars."""
        return sum(p.value.data.size for p in self._entries.values())

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.value.grad = np.zeros_like(p.value.data)

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store (values and optimizer state) in another precision."""
        out = ParamStore()
        out.step_count = self.step_count
        for name, p in self._entries.items():
            out.add(name, p.value.data.astype(dtype))
            q = out.entry(name)
            q.adam_m = p.adam_m.astype(dtype)
            q.adam_v = p.adam_v.astype(dtype)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self._entries.values())).value.dtype) if self._entries else ParamStore()


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every entry, then zero the grads."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {missing[0]!r} (run backward first)")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for _, p in params.items():
        x = p.value.data
        dt = x.dtype.type
        g = p.grad
        p.adam_m *= dt(beta1)
        p.adam_m += dt(1.0 - beta1) * g
        p.adam_v *= dt(beta2)
        p.adam_v += dt(1.0 - beta2) * (g * g)
        m_hat = p.adam_m / dt(c1)
        v_hat = p.adam_v / dt(c2)
        x -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    params.zero_grad()
