"""Local spatial discrepancy attention (LoSDA) encoding.

Per neighbor, a spatial-distribution embedding (SDE) and an elevation
embedding (EDE) are concatenated with the neighbor's incoming feature and
pooled over the K neighbors, by softmax attention or by max. Per point,
a directional encoding (DFE) convolves the features found in the eight
octants around it. Pooled and directional vectors are fused by a final
shared MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import Module, SharedMLP, glorot, linear, param
from .spatial import knn_search, octant_table

SDE_WIDTH = 10


@dataclass(frozen=True)
class LoSDAFlags:
    use_sde: bool = True
    use_dfe: bool = True
    use_ede: bool = True
    use_attention_pool: bool = True
    relative_ede: bool = False

    def __post_init__(self):
        if not (self.use_sde or self.use_dfe):
            raise ConfigError("LoSDA needs at least one of SDE and DFE enabled")


def sde_pre_embedding(center: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """``[p_i, p_ij, p_i - p_ij, |p_i - p_ij|]`` for centers (M, 3) and neighbors (M, K, 3)."""
    center = np.asarray(center, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    c = np.broadcast_to(center[..., None, :], neighbors.shape)
    rel = c - neighbors
    dist = np.sqrt((rel * rel).sum(axis=-1, keepdims=True))
    return np.concatenate([c, neighbors, rel, dist], axis=-1)


def ede_input(center: np.ndarray, neighbors: np.ndarray, relative: bool = False) -> np.ndarray:
    z = np.asarray(neighbors, dtype=np.float64)[..., 2:3]
    if relative:
        z = z - np.asarray(center, dtype=np.float64)[..., None, 2:3]
    return z


@dataclass
class LocalGeometry:
    """Everything LoSDA needs that depends on coordinates only.

    ``neighbors`` rows are stored sorted by index, so any reordering of an
    input row produces identical downstream arithmetic.
    """

    center_index: np.ndarray  # (M,) index of each center in the support set
    neighbors: np.ndarray  # (M, K) support indices
    sde: np.ndarray  # (M, K, 10)
    ede: np.ndarray  # (M, K, 1)
    octants: np.ndarray  # (M, 8) support indices

    @property
    def K(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return len(self.center_index)


def local_geometry(
    support: np.ndarray,
    center_index: np.ndarray,
    K: Optional[int] = None,
    neighbors: Optional[np.ndarray] = None,
    relative_ede: bool = False,
) -> LocalGeometry:
    """Build the geometry for centers picked from ``support`` by index.

    Pass either ``K`` (neighbors found by KNN search) or an explicit
    ``neighbors`` table.
    """
    support = np.asarray(support, dtype=np.float64)
    center_index = np.asarray(center_index, dtype=np.intp)
    centers = support[center_index]
    if neighbors is None:
        neighbors = knn_search(support, centers, K).indices
    rows = np.sort(np.asarray(neighbors, dtype=np.intp), axis=1)
    nb_xyz = support[rows]
    return LocalGeometry(
        center_index=center_index,
        neighbors=rows,
        sde=sde_pre_embedding(centers, nb_xyz),
        ede=ede_input(centers, nb_xyz, relative_ede),
        octants=octant_table(centers, center_index, rows, support),
    )


class OrientationConv(Module):
    """Three-stage 2x2x2 orientation convolution (X, then Y, then Z).

    Each stage merges the two cells along one axis with a shared
    ``2d -> d`` affine map followed by ReLU.
    """

    def __init__(self, d: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.d = d

        def w():
            return glorot(rng, 2 * d, d, shape=(2, d, d)) if rng is not None else np.zeros((2, d, d))

        self.wx, self.bx = param(w()), param(np.zeros(d))
        self.wy, self.by = param(w()), param(np.zeros(d))
        self.wz, self.bz = param(w()), param(np.zeros(d))
        self.shape_trace: list = []

    def _stage(self, v: Tensor, w: Tensor, b: Tensor, rows: int) -> Tensor:
        h = ad.reshape(v, (rows, 2 * self.d))
        return ad.relu(ad.add_bias(ad.matmul(h, ad.reshape(w, (2 * self.d, self.d))), b))

    def __call__(self, cube: Tensor) -> Tensor:
        """cube: (M, 2, 2, 2, d) indexed [x][y][z] -> (M, d)."""
        if cube.ndim != 5 or cube.shape[1:] != (2, 2, 2, self.d):
            raise DimensionError(f"orientation_conv expects (M, 2, 2, 2, {self.d}), got {cube.shape}")
        M, d = cube.shape[0], self.d
        trace = [(2, 2, 2, d)]
        vx = self._stage(ad.transpose(cube, (0, 2, 3, 1, 4)), self.wx, self.bx, M * 4)
        vx = ad.reshape(vx, (M, 2, 2, d))  # [y][z]
        trace.append((1, 2, 2, d))
        vxy = self._stage(ad.transpose(vx, (0, 2, 1, 3)), self.wy, self.by, M * 2)
        vxy = ad.reshape(vxy, (M, 2, d))  # [z]
        trace.append((1, 1, 2, d))
        vxyz = self._stage(vxy, self.wz, self.bz, M)
        trace.append((1, 1, 1, d))
        self.shape_trace = trace
        return vxyz


def orientation_conv(cube: Tensor, conv: OrientationConv) -> Tensor:
    return conv(cube)


def attention_pool(features: Tensor, score_layer: Module, return_scores: bool = False):
    """Softmax-over-K weighted sum of per-neighbor features (M, K, D) -> (M, D)."""
    scores = ad.softmax(score_layer(features), axis=1)
    pooled = ad.sum(ad.mul(features, scores), axis=1)
    return (pooled, scores) if return_scores else pooled


class LoSDA(Module):
    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: Optional[np.random.Generator] = None,
        flags: LoSDAFlags = LoSDAFlags(),
        norm: bool = True,
        enc_width: Optional[int] = None,
    ):
        super().__init__()
        self.flags = flags
        self.d_in, self.d_out = d_in, d_out
        enc = enc_width or max(1, d_out // 2)
        self.enc = enc
        width = d_in
        if flags.use_sde:
            self.sde = SharedMLP(SDE_WIDTH, enc, rng, norm)
            width += enc
        if flags.use_ede:
            self.ede = SharedMLP(1, enc, rng, norm)
            width += enc
        self.neighbor_width = width
        if flags.use_attention_pool:
            self.score = linear(width, width, rng)
        fused = width
        if flags.use_dfe:
            self.dfe_proj = SharedMLP(d_in, enc, rng, norm)
            self.orient = OrientationConv(enc, rng)
            fused += enc
        self.fusion = SharedMLP(fused, d_out, rng, norm)

    def neighbor_features(self, geom: LocalGeometry, features: Tensor) -> Tensor:
        """Per-neighbor concatenation [sde, ede, incoming feature]: (M, K, D)."""
        parts = []
        if self.flags.use_sde:
            parts.append(self.sde(Tensor(geom.sde)))
        if self.flags.use_ede:
            parts.append(self.ede(Tensor(geom.ede)))
        parts.append(ad.gather(features, geom.neighbors))
        return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]

    def directional(self, geom: LocalGeometry, features: Tensor) -> Tensor:
        proj = self.dfe_proj(features)
        cube = ad.reshape(ad.gather(proj, geom.octants), (len(geom), 2, 2, 2, self.enc))
        return self.orient(cube)

    def __call__(self, geom: LocalGeometry, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.d_in:
            raise DimensionError(f"LoSDA expects (N, {self.d_in}) features, got {features.shape}")
        f_hat = self.neighbor_features(geom, features)
        if self.flags.use_attention_pool:
            pooled = attention_pool(f_hat, self.score)
        else:
            pooled = ad.max_pool(f_hat, axis=1)
        parts = [pooled]
        if self.flags.use_dfe:
            parts.append(self.directional(geom, features))
        return self.fusion(ad.concat(parts, axis=-1) if len(parts) > 1 else pooled)


def losda_forward(geom: LocalGeometry, features: Tensor, module: LoSDA) -> Tensor:
    return module(geom, features)
