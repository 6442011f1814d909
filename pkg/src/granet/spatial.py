"""Geometry-only machinery: neighbors, sampling, tiling and interpolation.

Everything here works on plain ``(N, 3)`` coordinate arrays (a
:class:`~granet.pointcloud.PointCloud` is accepted wherever coordinates are
expected) and is deterministic: ties are always broken toward the lower
point index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, ParseError

# relative slack for treating two kd-tree distances as a potential tie
_TIE_SLACK = 1e-9


def _xyz(points) -> np.ndarray:
    arr = getattr(points, "xyz", points)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected (N, 3) coordinates, got shape {arr.shape}")
    return arr


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between matching rows of two broadcastable coordinate arrays."""
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


@dataclass
class NeighborIndex:
    indices: np.ndarray  # (N, K) int
    distances: np.ndarray  # (N, K) float

    @property
    def K(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return len(self.indices)


def _sorted_row(q, cand, support, K):
    cand = np.unique(cand)
    d = euclidean(support[cand], q)
    order = np.lexsort((cand, d))[:K]
    return cand[order], d[order]


def knn_search(support, queries, K: int) -> NeighborIndex:
    """K nearest support points of every query, nearest first.

    Rows are sorted by (distance, index); when the support holds fewer than
    ``K`` points the nearest entry is repeated to fill the row.
    """
    sup = _xyz(support)
    qry = _xyz(queries)
    if len(sup) == 0:
        raise ContractError("knn_search: empty support set")
    if K < 1:
        raise ContractError("knn_search: K must be at least 1")
    n = len(sup)
    k_eff = min(K, n)
    tree = cKDTree(sup)
    probe = min(k_eff + 1, n)
    _, cand = tree.query(qry, k=probe)
    cand = np.asarray(cand).reshape(len(qry), probe)
    dist = euclidean(sup[cand], qry[:, None, :])

    order = np.lexsort((cand, dist), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    idx = cand[:, :k_eff].copy()
    dst = dist[:, :k_eff].copy()

    if probe > k_eff:
        # the (k+1)-th candidate sits too close to the k-th: other points at
        # the same distance may exist, so collect the whole ball and re-sort
        kth = dst[:, -1]
        suspect = np.nonzero(dist[:, k_eff] <= kth * (1 + _TIE_SLACK) + 1e-300)[0]
        for r in suspect:
            radius = kth[r] * (1 + 2 * _TIE_SLACK) + 1e-12
            ball = tree.query_ball_point(qry[r], radius)
            idx[r], dst[r] = _sorted_row(qry[r], np.asarray(ball, dtype=np.intp), sup, k_eff)

    if k_eff < K:
        fill = K - k_eff
        idx = np.concatenate([idx, np.repeat(idx[:, :1], fill, axis=1)], axis=1)
        dst = np.concatenate([dst, np.repeat(dst[:, :1], fill, axis=1)], axis=1)
    return NeighborIndex(idx.astype(np.intp), dst)


def farthest_point_sampling(points, M: int) -> np.ndarray:
    """Greedy farthest-point order starting at index 0 (ties -> lowest index)."""
    xyz = _xyz(points)
    n = len(xyz)
    if not 1 <= M <= n:
        raise ContractError(f"farthest_point_sampling: need 1 <= M <= {n}, got {M}")
    chosen = np.empty(M, dtype=np.intp)
    chosen[0] = 0
    d = xyz - xyz[0]
    mind = np.einsum("ij,ij->i", d, d)
    mind[0] = -1.0
    for m in range(1, M):
        nxt = int(np.argmax(mind))
        chosen[m] = nxt
        d = xyz - xyz[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", d, d), out=mind)
        mind[chosen[: m + 1]] = -1.0
    return chosen


def octant_of(offsets: np.ndarray) -> np.ndarray:
    """Octant id ``4*[dx>=0] + 2*[dy>=0] + [dz>=0]`` of each offset."""
    o = offsets >= 0
    return 4 * o[..., 0] + 2 * o[..., 1] + o[..., 2]


def octant_select(center, center_index: int, neighbors: Sequence[int], support) -> np.ndarray:
    """Nearest neighbor per octant around ``center``; empty octants give the center.

    ``neighbors`` is one KNN row of indices into ``support``. The center's own
    index is never a candidate, so a self entry in the row is skipped.
    """
    row = np.asarray(neighbors, dtype=np.intp).reshape(1, -1)
    if row.size == 0:
        raise ContractError("octant_select: empty neighbor row")
    c = np.asarray(center, dtype=np.float64).reshape(1, 3)
    return octant_table(c, np.array([center_index]), row, _xyz(support))[0]


def octant_table(centers: np.ndarray, center_index: np.ndarray, rows: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Vectorized :func:`octant_select` for M centers -> (M, 8) support indices."""
    rows = np.asarray(rows, dtype=np.intp)
    M = rows.shape[0]
    center_index = np.asarray(center_index, dtype=np.intp)
    offs = support[rows] - centers[:, None, :]
    oct_id = octant_of(offs)
    dist = euclidean(support[rows], centers[:, None, :])
    valid = rows != center_index[:, None]
    out = np.repeat(center_index[:, None], 8, axis=1)
    big = np.iinfo(np.intp).max
    for o in range(8):
        mask = valid & (oct_id == o)
        d = np.where(mask, dist, np.inf)
        best = d.min(axis=1)
        tie = mask & (d == best[:, None])
        pick = np.where(tie, rows, big).min(axis=1)
        has = np.isfinite(best)
        out[has, o] = pick[has]
    return out


# --------------------------------------------------------------------------
# tiling


@dataclass
class TilePlan:
    block_size: float
    sub_size: float
    stride: float
    origins: np.ndarray  # (S, 2) subblock lower-left corners
    members: list  # S arrays of point indices
    block_ids: np.ndarray  # (S,) which 100 m block each subblock came from

    def __len__(self) -> int:
        return len(self.members)

    def centers(self) -> np.ndarray:
        return self.origins + self.sub_size / 2.0

    def coverage(self, n_points: int) -> np.ndarray:
        counts = np.zeros(n_points, dtype=np.int64)
        for m in self.members:
            np.add.at(counts, m, 1)
        return counts


def _window_count(extent: float, sub: float, stride: float) -> int:
    if extent <= sub:
        return 1
    return int(math.ceil((extent - sub) / stride - 1e-9)) + 1


def _window_members(coord, lo, hi, last):
    # half-open windows; the last window along an axis also takes its upper edge
    return (coord >= lo) & ((coord < hi) | (last & (coord <= hi)))


def tile_blocks(points, block: float = 100.0, sub: float = 25.0, stride: float = 12.5) -> TilePlan:
    """Split the cloud into ``block`` squares, then overlapping ``sub`` windows.

    Windows start at each block's lower-left corner and advance by
    ``stride`` until they reach the block's populated extent; empty windows
    are dropped.
    """
    xyz = _xyz(points)
    if len(xyz) == 0:
        raise ContractError("tile_blocks: empty cloud")
    if not 0 < stride <= sub:
        raise ContractError("tile_blocks: need 0 < stride <= sub")
    if block < sub:
        raise ContractError("tile_blocks: block must be at least as large as sub")
    xy = xyz[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    nblk = [max(1, int(math.ceil((hi[a] - lo[a]) / block - 1e-9))) for a in range(2)]
    bidx = np.floor((xy - lo) / block).astype(np.int64)
    for a in range(2):
        np.clip(bidx[:, a], 0, nblk[a] - 1, out=bidx[:, a])

    origins, members, block_ids = [], [], []
    for bx in range(nblk[0]):
        for by in range(nblk[1]):
            in_block = np.nonzero((bidx[:, 0] == bx) & (bidx[:, 1] == by))[0]
            if len(in_block) == 0:
                continue
            b0 = lo + block * np.array([bx, by], dtype=np.float64)
            pts = xy[in_block]
            top = pts.max(axis=0)
            counts = [_window_count(top[a] - b0[a], sub, stride) for a in range(2)]
            for i in range(counts[0]):
                ox = b0[0] + i * stride
                in_x = _window_members(pts[:, 0], ox, ox + sub, i == counts[0] - 1)
                for j in range(counts[1]):
                    oy = b0[1] + j * stride
                    in_y = _window_members(pts[:, 1], oy, oy + sub, j == counts[1] - 1)
                    sel = in_block[in_x & in_y]
                    if len(sel):
                        origins.append((ox, oy))
                        members.append(sel)
                        block_ids.append(bx * nblk[1] + by)
    return TilePlan(
        block_size=float(block),
        sub_size=float(sub),
        stride=float(stride),
        origins=np.array(origins, dtype=np.float64).reshape(-1, 2),
        members=members,
        block_ids=np.array(block_ids, dtype=np.int64),
    )


def write_manifest(plan: TilePlan, path, n_points: Optional[int] = None) -> None:
    """One ``origin_x origin_y count`` line per subblock, then its index line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# granet tile plan\n")
        extra = f" points={n_points}" if n_points is not None else ""
        fh.write(f"# block={plan.block_size!r} sub={plan.sub_size!r} stride={plan.stride!r}{extra}\n")
        for (ox, oy), m in zip(plan.origins, plan.members):
            fh.write(f"{float(ox)!r} {float(oy)!r} {len(m)}\n")
            fh.write(" ".join(str(int(i)) for i in m) + "\n")


def read_manifest(path) -> TilePlan:
    meta = {}
    body = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            text = line.strip()
            if text.startswith("#"):
                for tok in text[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
            elif text or body:
                body.append(text)
    if len(body) % 2:
        raise ParseError("manifest has a subblock header without an index line", path)
    origins, members = [], []
    for k in range(0, len(body), 2):
        head = body[k].split()
        if len(head) != 3:
            raise ParseError(f"bad subblock header {body[k]!r}", path)
        idx = np.array([int(t) for t in body[k + 1].split()], dtype=np.intp)
        if len(idx) != int(head[2]):
            raise ParseError(f"subblock {k // 2}: count {head[2]} but {len(idx)} indices", path)
        origins.append((float(head[0]), float(head[1])))
        members.append(idx)
    return TilePlan(
        block_size=float(meta.get("block", 100.0)),
        sub_size=float(meta.get("sub", 25.0)),
        stride=float(meta.get("stride", 12.5)),
        origins=np.array(origins, dtype=np.float64).reshape(-1, 2),
        members=members,
        block_ids=np.zeros(len(members), dtype=np.int64),
    )


# --------------------------------------------------------------------------
# fixed-size resampling


@dataclass
class SampledBlock:
    indices: np.ndarray  # (n,) indices into the parent cloud
    subblock: int
    seed: int


def resample_fixed(members, n: int = 4096, seed: int = 0, subblock: int = -1) -> SampledBlock:
    """Draw exactly ``n`` member indices.

    Without replacement when there are enough members; otherwise every
    member appears at least once and the remainder is drawn with
    replacement.
    """
    members = np.asarray(members, dtype=np.intp)
    if len(members) == 0:
        raise ContractError("resample_fixed: empty subblock")
    rng = np.random.default_rng(seed)
    if len(members) >= n:
        picked = rng.permutation(members)[:n]
    else:
        extra = rng.choice(members, size=n - len(members), replace=True)
        picked = rng.permutation(np.concatenate([members, extra]))
    return SampledBlock(picked, subblock, seed)


# --------------------------------------------------------------------------
# interpolation + overlap fusion


@dataclass
class Interpolation:
    indices: np.ndarray  # (N_fine, k) indices into the coarse set
    weights: np.ndarray  # (N_fine, k), rows sum to 1


def interpolation_index(coarse, fine, k: int = 1) -> Interpolation:
    """Inverse-distance weights from each fine point to its k nearest coarse points.

    Coincident points take the whole weight; filler entries (when the
    coarse set holds fewer than k points) get weight 0.
    """
    if k not in (1, 3):
        raise ContractError(f"interpolation_index: k must be 1 or 3, got {k}")
    c = _xyz(coarse)
    if len(c) == 0:
        raise ContractError("interpolation_index: empty coarse set")
    nb = knn_search(c, fine, k)
    if k == 1:
        return Interpolation(nb.indices, np.ones_like(nb.distances))
    real = np.arange(k)[None, :] < min(k, len(c))
    d = nb.distances
    with np.errstate(divide="ignore"):
        w = np.where(real, 1.0 / d, 0.0)
    exact = d[:, 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w = w / w.sum(axis=1, keepdims=True)
    return Interpolation(nb.indices, w)


def fuse_votes(
    n_points: int,
    votes: Sequence[tuple],
    centers: np.ndarray,
    points,
    class_count: int,
) -> np.ndarray:
    """Merge per-subblock predictions into one label per point.

    ``votes`` holds one ``(point_indices, predicted)`` pair per subblock,
    aligned with ``centers``. Majority wins; on a tie the vote of the
    nearest-centered subblock among the tied classes wins. Points that
    received no vote get -1.
    """
    xy = _xyz(points)[:, :2]
    counts = np.zeros((n_points, class_count), dtype=np.int64)
    for idx, pred in votes:
        np.add.at(counts, (np.asarray(idx), np.asarray(pred)), 1)
    out = np.where(counts.sum(axis=1) > 0, np.argmax(counts, axis=1), -1)
    top = counts.max(axis=1)
    tied = (counts == top[:, None]).sum(axis=1) > 1
    if np.any(tied):
        best_d = np.full(n_points, np.inf)
        for s, (idx, pred) in enumerate(votes):
            idx = np.asarray(idx, dtype=np.intp)
            pred = np.asarray(pred, dtype=np.intp)
            keep = tied[idx] & (counts[idx, pred] == top[idx])
            p, c = idx[keep], pred[keep]
            d = np.hypot(xy[p, 0] - centers[s][0], xy[p, 1] - centers[s][1])
            # strict < keeps the earlier subblock on exactly equal distances
            better = d < best_d[p]
            best_d[p[better]] = d[better]
            out[p[better]] = c[better]
    return out
