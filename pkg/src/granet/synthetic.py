"""A small three-class scene: flat ground, flat roofs and tree-like clusters."""

from __future__ import annotations

import numpy as np

from .pointcloud import ClassMap, PointCloud

SCENE_CLASSES = ClassMap(("ground", "roof", "vegetation"))
GROUND, ROOF, VEGETATION = 0, 1, 2

# (x0, y0, x1, y1) roof footprints and (cx, cy) canopy centers inside a 20 m square
_ROOFS = ((2.0, 11.0, 8.0, 18.0), (12.0, 2.0, 18.5, 7.0))
_CANOPIES = ((4.5, 5.0), (15.0, 14.5), (10.0, 9.5))


def _inside_roof(xy: np.ndarray) -> np.ndarray:
    hit = np.zeros(len(xy), dtype=bool)
    for x0, y0, x1, y1 in _ROOFS:
        hit |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    return hit


def synthetic_scene(n_points: int = 4096, seed: int = 0, extent: float = 20.0) -> PointCloud:
    """Ground at z=0, roof patches at z=8, canopy clusters scattered between 2 and 12 m.

    Half the points are ground, a quarter roof, a quarter vegetation.
    Vegetation carries multiple return numbers; intensities overlap
    between classes so geometry has to do the work.
    """
    rng = np.random.default_rng(seed)
    n_roof = n_points // 4
    n_veg = n_points // 4
    n_ground = n_points - n_roof - n_veg
    scale = extent / 20.0

    ground = []
    while sum(len(g) for g in ground) < n_ground:
        xy = rng.uniform(0, extent, size=(n_ground, 2))
        ground.append(xy[~_inside_roof(xy / scale)])
    g_xy = np.concatenate(ground)[:n_ground]
    g = np.column_stack([g_xy, np.zeros(n_ground)])

    areas = np.array([(x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in _ROOFS])
    which = rng.choice(len(_ROOFS), size=n_roof, p=areas / areas.sum())
    lo = np.array([r[:2] for r in _ROOFS])[which]
    hi = np.array([r[2:] for r in _ROOFS])[which]
    r = np.column_stack([rng.uniform(lo, hi) * scale, np.full(n_roof, 8.0)])

    centers = np.array(_CANOPIES)[rng.integers(0, len(_CANOPIES), size=n_veg)] * scale
    v_xy = np.clip(centers + rng.normal(0, 1.2, size=(n_veg, 2)), 0, extent)
    v = np.column_stack([v_xy, rng.uniform(2.0, 12.0, size=n_veg)])

    xyz = np.concatenate([g, r, v])
    intensity = np.concatenate(
        [rng.uniform(0.3, 0.6, n_ground), rng.uniform(0.35, 0.65, n_roof), rng.uniform(0.2, 0.5, n_veg)]
    )
    returns = np.concatenate(
        [np.ones(n_ground, dtype=np.int64), np.ones(n_roof, dtype=np.int64), rng.integers(1, 4, n_veg)]
    )
    labels = np.concatenate(
        [np.full(n_ground, GROUND), np.full(n_roof, ROOF), np.full(n_veg, VEGETATION)]
    ).astype(np.int64)
    order = rng.permutation(n_points)
    return PointCloud(
        xyz=xyz[order],
        intensity=intensity[order],
        return_number=returns[order],
        labels=labels[order],
        class_map=SCENE_CLASSES,
    )
