"""Finite-difference checks on small instances of every trainable building block."""

from __future__ import annotations

import time
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .gra import GRA
from .losda import LoSDA, OrientationConv, attention_pool, ede_input, local_geometry, sde_pre_embedding
from .network import GraNetModel, NetworkConfig
from .nn import Module, SharedMLP, linear

TOLERANCE = 1e-4
MODULES = (
    "mlp",
    "sde",
    "ede",
    "orientation",
    "attention_pool",
    "losda",
    "sra",
    "cra",
    "mode1",
    "mode2",
    "mode3",
    "full",
)


class CheckResult(NamedTuple):
    module: str
    max_error: float
    seconds: float
    coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _lift_biases(module: Module, rng: np.random.Generator) -> None:
    # zero biases put all-zero rows exactly on the ReLU kink, where the
    # one-sided derivative and the central difference disagree
    for _, p in module.named_parameters():
        if p.ndim == 1:
            p.data[...] = rng.uniform(0.05, 0.2, size=p.shape)


def _weighted_sum(out: Tensor, rng: np.random.Generator):
    w = Tensor(rng.normal(size=out.shape))
    return lambda o: ad.sum(ad.mul(o, w))


def _check(f, tensors, rng, per_tensor: Optional[int]) -> tuple:
    worst, coords = 0.0, 0
    for t in tensors:
        idx = None
        if per_tensor is not None and t.size > per_tensor:
            idx = np.sort(rng.choice(t.size, size=per_tensor, replace=False))
        worst = max(worst, finite_diff_check(f, t, indices=idx))
        coords += t.size if idx is None else len(idx)
    return worst, coords


def _run_layer(module: Module, x: np.ndarray, call, rng, per_tensor=None):
    _lift_biases(module, rng)
    xt = Tensor(x, requires_grad=True)
    loss = _weighted_sum(call(xt), rng)
    f = lambda _: loss(call(xt))  # noqa: E731
    return _check(f, [xt, *module.parameters()], rng, per_tensor)


def _cloud(rng, n=16):
    return rng.uniform(-1, 1, size=(n, 3)), rng.normal(size=(n, 4))


def check(name: str, seed: int = 0) -> CheckResult:
    """Max relative error between analytic and numeric gradients for one module."""
    if name not in MODULES:
        raise ValueError(f"unknown module {name!r}; choose from {', '.join(MODULES)}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    if name == "mlp":
        m = SharedMLP(5, 4, rng)
        err, n = _run_layer(m, rng.normal(size=(12, 5)), m, rng)
    elif name == "sde":
        m = SharedMLP(10, 4, rng)
        pre = sde_pre_embedding(rng.normal(size=(3, 3)), rng.normal(size=(3, 4, 3)))
        err, n = _run_layer(m, pre, m, rng)
    elif name == "ede":
        m = SharedMLP(1, 4, rng)
        z = ede_input(rng.normal(size=(3, 3)), rng.normal(size=(3, 4, 3)))
        err, n = _run_layer(m, z, m, rng)
    elif name == "orientation":
        m = OrientationConv(3, rng)
        err, n = _run_layer(m, rng.normal(size=(4, 2, 2, 2, 3)), m, rng)
    elif name == "attention_pool":
        m = linear(4, 4, rng)
        err, n = _run_layer(m, rng.normal(size=(3, 5, 4)), lambda x: attention_pool(x, m), rng)
    elif name == "losda":
        xyz, feats = _cloud(rng)
        geom = local_geometry(xyz, np.array([0, 2, 4, 6, 8, 10]), K=5)
        m = LoSDA(4, 6, rng)
        err, n = _run_layer(m, feats, lambda x: m(geom, x), rng)
    elif name == "full":
        err, n = _check_full(rng)
    else:
        m = GRA(8, 6, name, rng)
        err, n = _run_layer(m, rng.normal(size=(8, 6)), m, rng)
    return CheckResult(name, float(err), time.perf_counter() - start, n)


def _check_full(rng, per_tensor: int = 6):
    # a 64-point block leaves one point at the deepest level, where batch
    # statistics are undefined, so the end-to-end check runs without norm
    model = GraNetModel(NetworkConfig.miniature(batch_norm=False, seed=int(rng.integers(1 << 31))))
    _lift_biases(model, rng)
    n = model.config.points_per_block
    block = np.column_stack(
        [rng.uniform(0, 25, size=(n, 2)), rng.uniform(0, 12, size=n), rng.uniform(0, 1, size=n), rng.integers(1, 4, n)]
    )
    plan = model.plan(block)
    loss = _weighted_sum(model(block, plan), rng)
    f = lambda _: loss(model(block, plan))  # noqa: E731
    return _check(f, model.parameters(), rng, per_tensor)


def check_all(seed: int = 0) -> list:
    return [check(name, seed) for name in MODULES]
