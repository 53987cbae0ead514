"""Module containers and the parameterized layers built on :mod:`rc3d.ops`."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .init import fan_in_of, icnr_init, kaiming_normal
from .tensor import DTYPE, InvalidArgument, Parameter, Tensor


@dataclass(frozen=True)
class Activation:
    """Shifted leaky ReLU with fixed slope and shift."""

    slope: float = 0.1
    shift: float = 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return ops.shifted_leaky_relu(x, self.slope, self.shift)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> dict[str, Parameter]:
        """Stamp dotted path names onto parameters; reject shared parameters."""
        registry: dict[str, Parameter] = {}
        seen: set[int] = set()
        for name, p in self.named_parameters(prefix):
            if id(p) in seen:
                raise InvalidArgument(f"parameter {name!r} is registered twice")
            seen.add(id(p))
            p.name = name
            registry[name] = p
        return registry

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, m in self._modules.items():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise InvalidArgument(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise InvalidArgument(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


class ConvLayer(Module):
    """Conv weight/bias pair for 2 or 3 spatial dims; biases start at zero."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dims=3, slope=0.1,
                 init="kaiming", icnr_r: int = 1):
        super().__init__()
        self.spec = ops.ConvSpec.make(in_ch, out_ch, kernel, stride, padding, dims)
        shape = (out_ch, in_ch) + self.spec.kernel
        if init == "zeros":
            w = np.zeros(shape, dtype=DTYPE)
        elif init == "icnr":
            w = icnr_init(shape, icnr_r, rng, slope)
        else:
            w = kaiming_normal(shape, fan_in_of(shape), slope, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        if self.spec.dims == 3:
            return ops.conv3d(x, self.weight, self.bias, self.spec)
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class Dense(Module):
    def __init__(self, in_f: int, out_f: int, rng, slope=0.1):
        super().__init__()
        self.weight = Parameter(kaiming_normal((out_f, in_f), in_f, slope, rng))
        self.bias = Parameter(np.zeros(out_f, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
