"""Parameter containers and initialisers."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor.  ``decay`` marks eligibility for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name) so init does not depend on module order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def kaiming_normal(rng, shape, fan: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan)).astype(dtype)


class Module:
    """Minimal container: subclasses list child parameters/modules in order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in, n_out, *, bias=True, seed=0, name="linear", dtype=np.float64, std=None):
        rng = init_rng(seed, name)
        if std is None:
            w = kaiming_normal(rng, (n_out, n_in), n_out, dtype)  # fan_out
        else:
            w = (rng.standard_normal((n_out, n_in)) * std).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out, dtype=dtype), decay=False) if bias else None

    def __call__(self, x):
        from .tensor import linear

        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, *, stride=1, seed=0, name="conv", dtype=np.float64):
        rng = init_rng(seed, name)
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), decay=False)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x):
        from .tensor import conv2d

        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
