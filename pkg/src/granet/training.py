"""Loss, Adam, learning-rate schedule and the epoch loop."""

from __future__ import annotations

import dataclasses
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .metrics import ConfusionMatrix
from .network import BlockPlan, GraNetModel, save_checkpoint
from .pointcloud import PointCloud, feature_matrix
from .spatial import TilePlan, fuse_votes, knn_search, resample_fixed

CHECKPOINT_NAME = "checkpoint_best.bin"
LOG_NAME = "train.log"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    decay_factor: float = 0.7
    decay_step_epochs: int = 100
    max_epochs: int = 1000
    class_weights: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.decay_step_epochs < 1:
            raise ConfigError("decay_step_epochs must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return config.lr * config.decay_factor ** (epoch // config.decay_step_epochs)


def cross_entropy_loss(scores: Tensor, labels, weights=None) -> Tensor:
    """Mean over points of the (optionally class-weighted) negative log-likelihood."""
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} do not line up")
    n, c = scores.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range [0, {c})")
    target = np.zeros((n, c))
    target[np.arange(n), labels] = 1.0
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (c,):
            raise DimensionError(f"need {c} class weights, got {weights.shape}")
        target *= weights[labels][:, None]
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(scores, axis=1), Tensor(target))), -1.0 / n)


def inverse_frequency_weights(labels, class_count: int) -> np.ndarray:
    """Weights proportional to 1/frequency, normalized to mean 1 over present classes."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count).astype(np.float64)
    w = np.zeros(class_count)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    return w * present.sum() / w.sum()


class Adam:
    """Bias-corrected Adam; moment buffers mirror the parameter list."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise DimensionError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr: float) -> Adam:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("optimizer state belongs to a different parameter list")
    state.step(lr, grads)
    return state


# --------------------------------------------------------------------------
# blocks


@dataclass
class Block:
    features: np.ndarray  # (n, 5)
    labels: Optional[np.ndarray]
    indices: np.ndarray  # into the source cloud
    plan: Optional[BlockPlan] = None


def make_blocks(cloud: PointCloud, tiles: TilePlan, points_per_block: int, seed: int = 0) -> list:
    feats = feature_matrix(cloud)
    blocks = []
    for s, members in enumerate(tiles.members):
        picked = resample_fixed(members, points_per_block, seed=seed + s, subblock=s).indices
        labels = cloud.labels[picked] if cloud.labels is not None else None
        blocks.append(Block(feats[picked], labels, picked))
    return blocks


def ensure_plans(model: GraNetModel, blocks: Sequence[Block]) -> None:
    for b in blocks:
        if b.plan is None:
            b.plan = model.plan(b.features)


def _scores(model: GraNetModel, block: Block) -> Tensor:
    return model(block.features, block.plan)


def validate(model: GraNetModel, blocks: Sequence[Block], weights=None):
    """Mean block loss and confusion matrix with the model in inference mode."""
    was_training = model.training
    model.eval()
    ensure_plans(model, blocks)
    cm = ConfusionMatrix(model.config.class_count)
    total = 0.0
    try:
        with ad.no_grad():
            for b in blocks:
                s = _scores(model, b)
                total += cross_entropy_loss(s, b.labels, weights).item()
                cm.accumulate(b.labels, np.argmax(s.data, axis=1))
    finally:
        model.train(was_training)
    return total / len(blocks), cm


def predict_blocks(model: GraNetModel, blocks: Sequence[Block]) -> list:
    model.eval()
    ensure_plans(model, blocks)
    out = []
    with ad.no_grad():
        for b in blocks:
            out.append(np.argmax(_scores(model, b).data, axis=1))
    return out


def predict_cloud(model: GraNetModel, cloud: PointCloud, tiles: TilePlan, blocks: Sequence[Block]) -> np.ndarray:
    """Per-point labels fused over overlapping subblocks.

    Points that no sampled block covered take the label of the nearest
    covered point.
    """
    votes = []
    for b, pred in zip(blocks, predict_blocks(model, blocks)):
        # a resampled point can appear twice in a block; count it once
        idx, first = np.unique(b.indices, return_index=True)
        votes.append((idx, pred[first]))
    labels = fuse_votes(len(cloud), votes, tiles.centers(), cloud.xyz, model.config.class_count)
    missing = labels < 0
    if np.any(missing) and not np.all(missing):
        covered = np.flatnonzero(~missing)
        nearest = knn_search(cloud.xyz[covered], cloud.xyz[missing], 1).indices[:, 0]
        labels[missing] = labels[covered[nearest]]
    return labels


# --------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_oa: float

    def log_line(self, stamp: str) -> str:
        return f"{self.epoch} {self.lr!r} {self.train_loss!r} {self.val_loss!r} {self.val_oa!r} # {stamp}"


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (epoch, val_loss)


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def train(
    model: GraNetModel,
    train_blocks: Sequence[Block],
    val_blocks: Optional[Sequence[Block]],
    config: TrainConfig,
    out_dir=None,
    on_epoch: Optional[Callable[[EpochRecord], bool]] = None,
    meta: Optional[dict] = None,
    clock: Callable[[], str] = _timestamp,
) -> TrainHistory:
    """Run the epoch loop; ``on_epoch`` may return True to stop early.

    With ``out_dir`` set, each new validation-loss minimum overwrites
    ``checkpoint_best.bin`` and every epoch appends to ``train.log``.
    """
    train_blocks = list(train_blocks)
    if not train_blocks:
        raise ContractError("no training blocks")
    if any(b.labels is None or len(b.labels) == 0 for b in train_blocks):
        raise ContractError("training blocks need labeled points")
    val_blocks = list(val_blocks) if val_blocks else train_blocks
    if any(b.labels is None for b in val_blocks):
        raise ContractError("validation blocks need labeled points")
    weights = None if config.class_weights is None else np.asarray(config.class_weights)
    ensure_plans(model, train_blocks)
    ensure_plans(model, val_blocks)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / LOG_NAME).write_text("# epoch lr train_loss val_loss val_oa # timestamp\n")

    params = model.parameters()
    opt = Adam(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best = math.inf
    model.train()
    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(train_blocks))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            model.zero_grad()
            for i in batch:
                b = train_blocks[i]
                loss = cross_entropy_loss(_scores(model, b), b.labels, weights)
                losses.append(loss.item())
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step(lr)
        val_loss, cm = validate(model, val_blocks, weights)
        oa = float(np.trace(cm.counts) / cm.total)
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), val_loss, oa)
        history.epochs.append(rec)
        if val_loss < best:
            best = val_loss
            history.checkpoints.append((epoch, val_loss))
            if out is not None:
                info = dict(meta or {}, epoch=epoch, val_loss=repr(val_loss))
                save_checkpoint(model, out / CHECKPOINT_NAME, info)
        if out is not None:
            with open(out / LOG_NAME, "a") as fh:
                fh.write(rec.log_line(clock()) + "\n")
        if on_epoch is not None and on_epoch(rec):
            break
    return history
