"""Module/parameter plumbing and deterministic initialisation."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name, dtype=np.asarray(data).dtype)


class Init:
    """Seeded initialiser; parameters are drawn in construction order."""

    def __init__(self, seed: int, dtype=DEFAULT_DTYPE, std: float = 0.02):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = dtype
        self.std = std

    def trunc_normal(self, shape, std=None) -> Parameter:
        std = self.std if std is None else std
        n = int(np.prod(shape))
        vals = self.rng.standard_normal(n)
        bad = np.abs(vals) > 2.0
        while bad.any():
            vals[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(vals) > 2.0
        return Parameter((vals * std).reshape(shape).astype(self.dtype))

    def fan_in(self, shape, fan_in: int) -> Parameter:
        """He-scaled truncated normal, used for convolution kernels."""
        return self.trunc_normal(shape, std=float(np.sqrt(2.0 / fan_in)))

    def zeros(self, shape) -> Parameter:
        return Parameter(np.zeros(shape, dtype=self.dtype))

    def ones(self, shape) -> Parameter:
        return Parameter(np.ones(shape, dtype=self.dtype))


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (e.g. to float64 for audits)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in getattr(m, "_buffers", ()):
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        extra = set(state) - (set(own) | set(bufs))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        for m_name, m in self._buffer_owners():
            for key in m._buffers:
                full = f"{m_name}{key}"
                getattr(m, key)[...] = state[full]

    def _buffer_owners(self, prefix: str = ""):
        if getattr(self, "_buffers", ()):
            yield prefix, self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val._buffer_owners(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._buffer_owners(f"{prefix}{key}.{i}.")


class Linear(Module):
    """Pointwise projection over the channel axis (a 1x1 convolution)."""

    def __init__(self, init: Init, cin: int, cout: int, bias: bool = True):
        self.weight = init.trunc_normal((cin, cout))
        if bias:
            self.bias = init.zeros((cout,))
        self.cin, self.cout = cin, cout

    def __call__(self, x):
        return ops.linear(x, self.weight, getattr(self, "bias", None))


class BatchNorm(Module):
    """Batch norm over all axes but channels; ``groups`` splits the batch axis."""

    _buffers = ("running_mean", "running_var")
    update_stats = True

    def __init__(self, init: Init, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = init.ones((channels,))
        self.bias = init.zeros((channels,))
        self.running_mean = np.zeros(channels, dtype=init.dtype)
        self.running_var = np.ones(channels, dtype=init.dtype)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x, groups: int = 1):
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps,
                              groups=groups, update_stats=self.update_stats)


class LayerNorm(Module):
    def __init__(self, init: Init, channels: int, eps: float = 1e-5):
        self.weight = init.ones((channels,))
        self.bias = init.zeros((channels,))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


def freeze_batch_stats(model: Module, frozen: bool = True) -> None:
    """Stop (or resume) running-statistic updates, e.g. during finite differences."""
    for m in model.modules():
        if isinstance(m, BatchNorm):
            m.update_stats = not frozen
