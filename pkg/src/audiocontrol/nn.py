"""Parameter containers and the handful of layers the model is built from."""
from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Attribute-based parameter tree, walked in attribute definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item
            elif isinstance(value, dict):
                for key in sorted(value):
                    item = value[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{key}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        for name, p in params.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise T.ShapeError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
                p.data = value.copy()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def clone(self):
        """Deep copy with fresh, independent parameter arrays."""
        return copy.deepcopy(self)


def count_params(module: Module, trainable_only: bool = True) -> int:
    return int(sum(p.size for p in module.parameters() if p.requires_grad or not trainable_only))


class Linear(Module):
    """``y = x W + b`` on the last axis, with an optional low-rank delta."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, scale: float = 1.0):
        std = 0.0 if zero else scale / np.sqrt(d_in)
        self.weight = Parameter(rng.standard_normal((d_in, d_out)) * std)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    @property
    def shape(self) -> tuple:
        return self.weight.shape

    def __call__(self, x: Tensor, lora: "LoRA | None" = None) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if lora is not None:
            y = y + lora(x)
        return y


class ZeroConv(Linear):
    """Kernel-1 convolution over time (a channel matmul) with weights and bias at zero."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__(d_in, d_out, rng, bias=True, zero=True)


class Conv1d(Module):
    """Same-padded temporal convolution on channels-last input ``[B, T, C]``."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, scale: float = 1.0):
        if kernel % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        std = scale / np.sqrt(c_in * kernel)
        self.weight = Parameter(rng.standard_normal((c_out, c_in, kernel)) * std)
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        k = self.weight.shape[2]
        y = T.conv1d(x.transpose(0, 2, 1), self.weight, self.bias, stride=1, padding=k // 2)
        return y.transpose(0, 2, 1)


class LoRA(Module):
    """Low-rank delta ``x A B * alpha/rank``; ``B`` starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator, alpha: float | None = None):
        self.A = Parameter(rng.standard_normal((d_in, rank)) / np.sqrt(d_in))
        self.B = Parameter(np.zeros((rank, d_out)))
        self._scale = (rank if alpha is None else alpha) / rank

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.A) @ self.B * self._scale


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sin/cos features ``[len(positions), dim]`` with geometric frequencies."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
