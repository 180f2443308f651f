"""Parameter containers and the point-wise layers used across the model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.01


def default_groups(channels: int) -> int:
    """Group count for group norm: at most 8, with at least 4 channels per group.

    Statistics are per row, so a one-channel group would always normalise to
    zero; narrow layers therefore get fewer, wider groups.
    """
    g = max(1, min(8, channels // 4))
    while channels % g:
        g -= 1
    return g


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64) -> Tensor:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the Kaiming-uniform bound for a=sqrt(5)
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules
    and lists of submodules are walked recursively in attribute order.
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, cin, (cin, cout))
        self.bias = uniform_fan_in(rng, cin, (cout,)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        self.groups = groups or default_groups(channels)
        if channels % self.groups:
            raise ValueError(f"{channels} channels not divisible into {self.groups} groups")
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class SharedMLP(Module):
    """Point-wise MLP: (Linear -> GroupNorm -> LeakyReLU) for every hidden
    width, then a final Linear unless ``final_act`` keeps the normalisation
    and activation on the last layer too."""

    def __init__(self, widths, rng, final_act: bool = False):
        self.layers = []
        self.norms = []
        self.final_act = final_act
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(Linear(cin, cout, rng))
            last = i == len(widths) - 2
            self.norms.append(GroupNorm(cout) if (not last or final_act) else None)

    def forward(self, x):
        for lin, norm in zip(self.layers, self.norms):
            x = lin(x)
            if norm is not None:
                x = T.leaky_relu(norm(x), LEAKY_SLOPE)
        return x
