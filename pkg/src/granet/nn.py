"""Parameter containers and the shared MLP used throughout the network."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Registers parameters, buffers and child modules in assignment order.

    Assigning a grad-requiring :class:`Tensor` to an attribute registers it
    as a parameter, assigning a :class:`Module` registers a child. Buffers
    (non-learnable state such as batch-norm running statistics) go through
    :meth:`register_buffer`.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise ContractError(f"unknown buffer {name!r}")
        self.register_buffer(name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        seen: set = set()
        for name, t in self._walk_params(prefix):
            if id(t) in seen:
                raise ContractError(f"parameter {name} registered twice")
            seen.add(id(t))
            yield name, t

    def _walk_params(self, prefix):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child._walk_params(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, b in self._buffers.items():
            yield prefix + name, (self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def state_dict(self) -> dict:
        """Parameters and buffers by dotted name (arrays are copies)."""
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        for name, (owner, attr) in self.named_buffers():
            state[name] = np.array(getattr(owner, attr), dtype=np.float64)
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {t.shape}")
            t.data[...] = arr
        for name, (owner, attr) in buffers.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != np.shape(getattr(owner, attr)):
                raise DimensionError(f"{name}: stored shape {arr.shape} != {np.shape(getattr(owner, attr))}")
            owner.set_buffer(attr, arr.copy())


def param(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


class BatchNorm(Module):
    def __init__(self, width: int):
        super().__init__()
        self.gamma = param(np.ones(width))
        self.beta = param(np.zeros(width))
        self.register_buffer("running_mean", np.zeros(width))
        self.register_buffer("running_var", np.ones(width))

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            return ad.batch_norm(x, self.gamma, self.beta, BN_EPS, running=(self.running_mean, self.running_var))
        out, mu, var = ad.batch_norm(x, self.gamma, self.beta, BN_EPS)
        self.register_buffer("running_mean", BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu)
        self.register_buffer("running_var", BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var)
        return out


class SharedMLP(Module):
    """Per-position affine map, then optional batch norm and ReLU.

    The same weights apply at every position of an ``[..., d_in]`` input;
    normalization statistics are taken over all positions.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: Optional[np.random.Generator] = None,
        norm: bool = True,
        activation: Optional[str] = "relu",
    ):
        super().__init__()
        if activation not in ("relu", None):
            raise ContractError(f"unsupported activation {activation!r}")
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        w = glorot(rng, d_in, d_out) if rng is not None else np.zeros((d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out))
        self.norm = BatchNorm(d_out) if norm else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"shared MLP expects last extent {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        h = ad.reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        h = ad.add_bias(ad.matmul(h, self.weight), self.bias)
        if self.norm is not None:
            h = self.norm(h)
        if self.activation == "relu":
            h = ad.relu(h)
        return ad.reshape(h, lead + (self.d_out,)) if x.ndim != 2 else h


def linear(d_in: int, d_out: int, rng=None) -> SharedMLP:
    """Plain affine layer (no normalization, no activation)."""
    return SharedMLP(d_in, d_out, rng, norm=False, activation=None)
