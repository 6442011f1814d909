"""Labeled ALS point clouds in whitespace-separated ``.pts`` text.

One point per line: ``x y z intensity return_number [label]``. Lines
starting with ``#`` are comments. Floats are written in shortest
round-trip form so reading back a written file reproduces every value
bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ParseError

ISPRS_CLASSES = (
    "powerline",
    "low_vegetation",
    "impervious_surfaces",
    "car",
    "fence_hedge",
    "roof",
    "facade",
    "shrub",
    "tree",
)


@dataclass(frozen=True)
class ClassMap:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ContractError("a class map needs at least two classes")
        if len(set(names)) != len(names):
            raise ContractError(f"class names must be unique: {names}")

    @property
    def class_count(self) -> int:
        return len(self.names)

    @classmethod
    def isprs(cls) -> "ClassMap":
        return cls(ISPRS_CLASSES)


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float
    return_number: int
    label: Optional[int] = None


@dataclass
class PointCloud:
    """Struct-of-arrays point cloud; ``labels`` is ``None`` for unlabeled data."""

    xyz: np.ndarray
    intensity: np.ndarray
    return_number: np.ndarray
    labels: Optional[np.ndarray] = None
    class_map: ClassMap = field(default_factory=ClassMap.isprs)
    crs_note: str = ""

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.return_number = np.asarray(self.return_number, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ContractError("point coordinates must be finite")
        if np.any(self.return_number < 0):
            raise ContractError("return numbers must be non-negative")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
            bad = (self.labels < 0) | (self.labels >= self.class_map.class_count)
            if np.any(bad):
                raise ContractError(
                    f"label {self.labels[bad][0]} outside 0..{self.class_map.class_count - 1}"
                )

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def point(self, i: int) -> Point:
        label = None if self.labels is None else int(self.labels[i])
        x, y, z = (float(v) for v in self.xyz[i])
        return Point(x, y, z, float(self.intensity[i]), int(self.return_number[i]), label)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index, dtype=np.intp)
        return replace(
            self,
            xyz=self.xyz[index],
            intensity=self.intensity[index],
            return_number=self.return_number[index],
            labels=None if self.labels is None else self.labels[index],
        )

    @classmethod
    def from_points(cls, points: Sequence[Point], class_map: Optional[ClassMap] = None) -> "PointCloud":
        labels = None
        if points and all(p.label is not None for p in points):
            labels = [p.label for p in points]
        return cls(
            xyz=[(p.x, p.y, p.z) for p in points],
            intensity=[p.intensity for p in points],
            return_number=[p.return_number for p in points],
            labels=labels,
            class_map=class_map or ClassMap.isprs(),
        )


def feature_vector(p: Point) -> np.ndarray:
    """The 5D network input ``[x, y, z, intensity, return_number]``."""
    return np.array([p.x, p.y, p.z, p.intensity, p.return_number], dtype=np.float64)


def feature_matrix(cloud: PointCloud) -> np.ndarray:
    return np.column_stack([cloud.xyz, cloud.intensity, cloud.return_number.astype(np.float64)])


# slice of the 5D vector consumed by the initial lift layer
NON_COORDINATE = slice(3, 5)


def read_pts(path, has_labels: bool, class_map: Optional[ClassMap] = None) -> PointCloud:
    class_map = class_map or ClassMap.isprs()
    want = 6 if has_labels else 5
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != want:
                raise ParseError(f"expected {want} fields, found {len(fields)}", path, lineno)
            try:
                values = [float(f) for f in fields[:5]]
            except ValueError:
                raise ParseError(f"non-numeric field in {text!r}", path, lineno) from None
            rn = values[4]
            if rn != int(rn) or rn < 0:
                raise ParseError(f"return number must be a non-negative integer, got {fields[4]}", path, lineno)
            if has_labels:
                try:
                    label = int(fields[5])
                except ValueError:
                    raise ParseError(f"label must be an integer, got {fields[5]!r}", path, lineno) from None
                if not 0 <= label < class_map.class_count:
                    raise ContractError(
                        f"{path}:{lineno}: label {label} outside 0..{class_map.class_count - 1}"
                    )
                labels.append(label)
            rows.append(values)
    if not rows:
        raise ParseError("empty point cloud", path)
    arr = np.array(rows, dtype=np.float64)
    try:
        return PointCloud(
            xyz=arr[:, :3],
            intensity=arr[:, 3],
            return_number=arr[:, 4].astype(np.int64),
            labels=np.array(labels, dtype=np.int64) if has_labels else None,
            class_map=class_map,
            crs_note=f"read from {os.fspath(path)}",
        )
    except ContractError as exc:
        raise ParseError(str(exc), path) from None


def has_label_column(path) -> bool:
    """True when the first data line of a ``.pts`` file has six fields."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            text = line.strip()
            if text and not text.startswith("#"):
                return len(text.split()) == 6
    raise ParseError("empty point cloud", path)


def read_pts_auto(path, class_map: Optional[ClassMap] = None) -> PointCloud:
    return read_pts(path, has_label_column(path), class_map)


def _fmt(v: float) -> str:
    return repr(float(v))


def _point_fields(cloud: PointCloud, i: int) -> list:
    x, y, z = cloud.xyz[i]
    return [_fmt(x), _fmt(y), _fmt(z), _fmt(cloud.intensity[i]), str(int(cloud.return_number[i]))]


def write_pts(cloud: PointCloud, path, with_labels: Optional[bool] = None) -> None:
    with_labels = cloud.has_labels if with_labels is None else with_labels
    if with_labels and not cloud.has_labels:
        raise ContractError("cloud has no labels to write")
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(cloud)):
            fields = _point_fields(cloud, i)
            if with_labels:
                fields.append(str(int(cloud.labels[i])))
            fh.write(" ".join(fields) + "\n")


def _check_predicted(cloud: PointCloud, predicted) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
    if len(predicted) != len(cloud):
        raise ContractError(f"{len(predicted)} predictions for {len(cloud)} points")
    return predicted


def write_labels(cloud: PointCloud, predicted, path) -> None:
    """Each point's five attributes followed by its predicted class.

    The result is itself a labeled ``.pts`` file.
    """
    predicted = _check_predicted(cloud, predicted)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(cloud)):
            fh.write(" ".join(_point_fields(cloud, i) + [str(int(predicted[i]))]) + "\n")


def error_flags(truth, predicted) -> np.ndarray:
    return (np.asarray(truth) == np.asarray(predicted)).astype(np.int64)


def write_error_map(cloud: PointCloud, predicted, path) -> None:
    """Label-file lines with a trailing 1 (correct) / 0 (wrong) flag."""
    predicted = _check_predicted(cloud, predicted)
    if not cloud.has_labels:
        raise ContractError("an error map needs ground-truth labels")
    flags = error_flags(cloud.labels, predicted)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(cloud)):
            fields = _point_fields(cloud, i) + [str(int(predicted[i])), str(int(flags[i]))]
            fh.write(" ".join(fields) + "\n")


def normalize_hag(cloud: PointCloud, cell_size: float = 25.0) -> PointCloud:
    """Height above the lowest point of each horizontal grid cell.

    A stand-in for terrain normalization: z becomes z minus the minimum z of
    the ``cell_size`` square (anchored at the cloud's min x/y) holding the
    point. Everything else is copied unchanged.
    """
    if cell_size <= 0:
        raise ContractError("cell_size must be positive")
    xy = cloud.xyz[:, :2]
    cells = np.floor((xy - xy.min(axis=0)) / cell_size).astype(np.int64)
    _, cell_id = np.unique(cells, axis=0, return_inverse=True)
    cell_id = cell_id.reshape(-1)
    floor = np.full(cell_id.max() + 1, np.inf)
    np.minimum.at(floor, cell_id, cloud.xyz[:, 2])
    xyz = cloud.xyz.copy()
    xyz[:, 2] = cloud.xyz[:, 2] - floor[cell_id]
    return replace(cloud, xyz=xyz, intensity=cloud.intensity.copy(), return_number=cloud.return_number.copy())
