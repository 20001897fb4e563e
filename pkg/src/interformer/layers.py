"""Parameter store and the small dense building blocks every arch reuses."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import AssemblyError


class ParamStore:
    """Ordered name -> 2-D Tensor mapping with prefix-scoped views.

    ``store.scope("layer0.inter")["w1"]`` reads ``"layer0.inter.w1"``.
    """

    def __init__(self, tensors=None, prefix: str = ""):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict() if tensors is None else tensors
        self._prefix = prefix

    def _key(self, name: str) -> str:
        return f"{self._prefix}{name}"

    def scope(self, name: str) -> "ParamStore":
        return ParamStore(self._tensors, self._key(name) + ".")

    def add(self, name: str, data: np.ndarray) -> Tensor:
        key = self._key(name)
        if key in self._tensors:
            raise AssemblyError(f"duplicate parameter {key}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=key)
        if t.batched:
            raise AssemblyError(f"parameter {key} must be 2-D")
        self._tensors[key] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        key = self._key(name)
        try:
            return self._tensors[key]
        except KeyError:
            raise AssemblyError(f"missing parameter {key}") from None

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self._tensors

    def items(self):
        return [(k, v) for k, v in self._tensors.items() if k.startswith(self._prefix)]

    def names(self) -> list:
        return [k for k, _ in self.items()]

    def tensors(self) -> list:
        return [v for _, v in self.items()]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.items())

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.items()}

    def restore(self, snap: dict) -> None:
        for k, v in self.items():
            v.data = snap[k].copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng, bias: bool = True,
                zero: bool = False, bias_value: float = 0.0) -> None:
    """Row-vector linear map ``x @ W + b`` with ``W: (n_in, n_out)``."""
    sub = store.scope(name)
    sub.add("w", np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out))
    if bias:
        sub.add("b", np.full((1, n_out), bias_value))


def linear(x: Tensor, p: ParamStore) -> Tensor:
    y = x @ p["w"]
    if "b" in p:
        y = ag.bias_add(y, p["b"])
    return y


def init_mlp(store: ParamStore, name: str, sizes: Sequence[int], rng, zero_last: bool = False,
             last_bias: float = 0.0) -> None:
    sub = store.scope(name)
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(sub, f"l{i}", a, b, rng, zero=zero_last and last, bias_value=last_bias if last else 0.0)


def mlp(x: Tensor, p: ParamStore, act: str = "swish", final: str = "identity") -> Tensor:
    """Row-vector MLP; hidden layers use ``act``, the last layer ``final``."""
    n = 0
    while f"l{n}.w" in p:
        n += 1
    for i in range(n):
        x = linear(x, p.scope(f"l{i}"))
        x = ag.activation(x, act if i < n - 1 else final)
    return x


def mlp_param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
