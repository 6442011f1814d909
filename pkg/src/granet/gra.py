"""Global relation-aware attention (GRA).

Both sub-modules treat a set of vectors as graph nodes: SRA uses the N
points (rows of an N x C tensor), CRA the C channels (its columns). For
each node they build

    affinity      A[i, j] = alpha(x_i) . beta(x_j)
    relation      r_i     = [A[i, :], A[:, i]]
    augmented     y_i     = [max(alpha(x_i)), rel(r_i)]
    score         a_i     = sigmoid(W2 relu(W1 y_i))

and rescale node i of the input by a_i. The affinity matrix is dense,
so memory grows with the square of the node count.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Module, SharedMLP, glorot, linear, param

GRA_MODES = ("off", "sra", "cra", "mode1", "mode2", "mode3")


def affinity(nodes: Tensor, alpha, beta) -> Tensor:
    """Pairwise dot products of embedded nodes: (n, w) -> (n, n)."""
    return ad.matmul(alpha(nodes), ad.transpose(beta(nodes)))


def relation_vector(A: np.ndarray, i: int) -> np.ndarray:
    """Row i followed by column i of an affinity matrix."""
    A = np.asarray(A)
    return np.concatenate([A[i, :], A[:, i]])


class RelationAttention(Module):
    """One attention scalar per node from its relation-augmented feature."""

    def __init__(
        self,
        node_count: int,
        node_width: int,
        rng: Optional[np.random.Generator] = None,
        embed_width: int = 1,
        relation_width: int = 1,
        hidden_width: int = 1,
        norm: bool = True,
    ):
        super().__init__()
        self.node_count, self.node_width = node_count, node_width
        self.alpha = SharedMLP(node_width, embed_width, rng, norm)
        self.beta = SharedMLP(node_width, embed_width, rng, norm)
        # rel(r_i) = r_i @ [rel_row; rel_col] + rel_bias, split so the
        # n x 2n concatenation never has to be materialized
        def w():
            if rng is None:
                return np.zeros((node_count, relation_width))
            return glorot(rng, 2 * node_count, relation_width, shape=(node_count, relation_width))

        self.rel_row = param(w())
        self.rel_col = param(w())
        self.rel_bias = param(np.zeros(relation_width))
        self.rel_norm = BatchNorm(relation_width) if norm else None
        self.head_hidden = linear(1 + relation_width, hidden_width, rng)
        self.head_out = linear(hidden_width, 1, rng)

    def augment(self, nodes: Tensor, return_affinity: bool = False):
        if nodes.shape != (self.node_count, self.node_width):
            raise DimensionError(
                f"relation attention built for {(self.node_count, self.node_width)} nodes, got {nodes.shape}"
            )
        ea = self.alpha(nodes)
        eb = self.beta(nodes)
        A = ad.matmul(ea, ad.transpose(eb))
        # A^T W_col is computed as (W_col^T A)^T so the big matrix is never transposed
        col = ad.transpose(ad.matmul(ad.transpose(self.rel_col), A))
        rel = ad.add(ad.matmul(A, self.rel_row), col)
        rel = ad.add_bias(rel, self.rel_bias)
        if self.rel_norm is not None:
            rel = self.rel_norm(rel)
        rel = ad.relu(rel)
        pooled = ad.reshape(ad.max_pool(ea, axis=1), (self.node_count, 1))
        y = ad.concat([pooled, rel], axis=1)
        return (y, A) if return_affinity else y

    def score(self, y: Tensor) -> Tensor:
        h = ad.relu(self.head_hidden(y))
        return ad.reshape(ad.sigmoid(self.head_out(h)), (y.shape[0],))

    def __call__(self, nodes: Tensor) -> Tensor:
        return self.score(self.augment(nodes))


def _reduced(n: int, ratio: int) -> int:
    return max(1, math.ceil(n / ratio))


class GRA(Module):
    """SRA and/or CRA wired according to ``mode``.

    ``mode1`` runs CRA then SRA, ``mode2`` SRA then CRA, ``mode3`` runs
    both on the input and fuses the concatenation back to C channels.
    """

    def __init__(
        self,
        n_points: int,
        channels: int,
        mode: str = "mode1",
        rng: Optional[np.random.Generator] = None,
        reduction: int = 8,
        embed_width: Optional[int] = None,
        relation_width: Optional[int] = None,
        norm: bool = True,
    ):
        super().__init__()
        if mode not in GRA_MODES:
            raise ConfigError(f"gra_mode must be one of {GRA_MODES}, got {mode!r}")
        self.mode = mode
        self.n_points, self.channels = n_points, channels
        if mode in ("sra", "mode1", "mode2", "mode3"):
            rel = relation_width or _reduced(n_points, reduction)
            self.sra = RelationAttention(
                n_points,
                channels,
                rng,
                embed_width=embed_width or _reduced(channels, reduction),
                relation_width=rel,
                hidden_width=_reduced(1 + rel, reduction),
                norm=norm,
            )
        if mode in ("cra", "mode1", "mode2", "mode3"):
            rel = relation_width or _reduced(channels, reduction)
            self.cra = RelationAttention(
                channels,
                n_points,
                rng,
                embed_width=embed_width or _reduced(n_points, reduction),
                relation_width=rel,
                hidden_width=_reduced(1 + rel, reduction),
                norm=norm,
            )
        if mode == "mode3":
            self.fuse = SharedMLP(2 * channels, channels, rng, norm)

    def spatial(self, x: Tensor) -> Tensor:
        return ad.scale_rows(x, self.sra(x))

    def channel(self, x: Tensor) -> Tensor:
        return ad.scale_cols(x, self.cra(ad.transpose(x)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape != (self.n_points, self.channels):
            raise DimensionError(f"GRA built for {(self.n_points, self.channels)}, got {x.shape}")
        if self.mode == "off":
            return x
        if self.mode == "sra":
            return self.spatial(x)
        if self.mode == "cra":
            return self.channel(x)
        if self.mode == "mode1":
            return self.spatial(self.channel(x))
        if self.mode == "mode2":
            return self.channel(self.spatial(x))
        return self.fuse(ad.concat([self.spatial(x), self.channel(x)], axis=1))


def sra_forward(x: Tensor, gra: GRA) -> Tensor:
    return gra.spatial(x)


def cra_forward(x: Tensor, gra: GRA) -> Tensor:
    return gra.channel(x)


def gra_forward(x: Tensor, gra: GRA) -> Tensor:
    return gra(x)
