# src/voxelization/voxelgrid.py

import logging
import os
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from src.utils.errors import FormatError

logger = logging.getLogger(__name__)

# KITTI detection range [x_min, y_min, z_min, x_max, y_max, z_max] and voxel size
KITTI_POINT_CLOUD_RANGE = (0.0, -40.0, -3.0, 70.4, 40.0, 1.0)
KITTI_VOXEL_SIZE = (0.05, 0.05, 0.1)


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    voxel_size: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, np.float64))
        object.__setattr__(self, "voxel_size", _frozen(self.voxel_size, np.float64))
        object.__setattr__(self, "extent", _frozen(self.extent, np.int64))
        for name in ("origin", "voxel_size", "extent"):
            if getattr(self, name).shape != (3,):
                raise ValueError(f"GridSpec.{name} must have 3 components")
        if (self.voxel_size <= 0).any():
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size.tolist()}")
        if (self.extent < 1).any():
            raise ValueError(f"extent must be >= 1, got {self.extent.tolist()}")

    @classmethod
    def from_range(cls, point_cloud_range: Sequence[float], voxel_size: Sequence[float]) -> "GridSpec":
        lo = np.asarray(point_cloud_range[:3], dtype=np.float64)
        hi = np.asarray(point_cloud_range[3:], dtype=np.float64)
        size = np.asarray(voxel_size, dtype=np.float64)
        extent = np.round((hi - lo) / size).astype(np.int64)
        return cls(origin=lo, voxel_size=size, extent=extent)

    @classmethod
    def kitti(cls) -> "GridSpec":
        return cls.from_range(KITTI_POINT_CLOUD_RANGE, KITTI_VOXEL_SIZE)

    def voxel_coords(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return np.floor((pos - self.origin) / self.voxel_size).astype(np.int64)

    def contains(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords).reshape(-1, 3)
        return np.all((c >= 0) & (c < self.extent), axis=1)

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass(frozen=True)
class SparseVoxelMap:
    """
    Occupied voxels in lexicographic (ix, iy, iz) order.
      coords   : (M, 3) int64
      features : (M, C) float64
      centers  : (M, 3) voxel-center positions
      counts   : (M,)   member points (0 for voxels inserted from a feature file)
    """
    spec: GridSpec
    coords: np.ndarray
    features: np.ndarray
    centers: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for name in ("coords", "features", "centers", "counts"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.coords.shape[0] and not self.spec.contains(self.coords).all():
            raise ValueError("voxel coordinate outside grid extent")

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    def lookup(self) -> Dict[Tuple[int, int, int], int]:
        return {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}

    @classmethod
    def empty(cls, spec: GridSpec, channels: int = 5) -> "SparseVoxelMap":
        return cls(spec=spec,
                   coords=np.zeros((0, 3), dtype=np.int64),
                   features=np.zeros((0, channels), dtype=np.float64),
                   centers=np.zeros((0, 3), dtype=np.float64),
                   counts=np.zeros(0, dtype=np.int64))


def _kahan_group_sum(values: np.ndarray, groups: np.ndarray, num_groups: int) -> np.ndarray:
    """
    Compensated per-group sums. Members are visited in a canonical order
    (group, then feature values) so the result does not depend on input order.
    """
    order = np.lexsort(tuple(values[:, c] for c in reversed(range(values.shape[1]))) + (groups,))
    g = groups[order]
    x = values[order]
    counts = np.bincount(g, minlength=num_groups)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(g.size) - starts[g]

    total = np.zeros((num_groups, values.shape[1]), dtype=np.float64)
    comp = np.zeros_like(total)
    for j in range(int(counts.max()) if counts.size else 0):
        sel = rank == j
        vox = g[sel]
        y = x[sel] - comp[vox]
        t = total[vox] + y
        comp[vox] = (t - total[vox]) - y
        total[vox] = t
    return total


def voxelize(points: np.ndarray, spec: GridSpec) -> SparseVoxelMap:
    """
    Mean 5-D point feature per occupied voxel. Points outside the grid extent
    are dropped and counted in a warning.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be (N, C), got shape {pts.shape}")
    coords = spec.voxel_coords(pts[:, :3])
    keep = spec.contains(coords)
    dropped = int(pts.shape[0] - keep.sum())
    if dropped:
        logger.warning("voxelize: dropped %d of %d points outside the grid extent", dropped, pts.shape[0])
    if not keep.any():
        return SparseVoxelMap.empty(spec, channels=pts.shape[1])

    kept = pts[keep]
    keys, inverse = np.unique(coords[keep], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=keys.shape[0])
    sums = _kahan_group_sum(kept, inverse, keys.shape[0])
    return SparseVoxelMap(spec=spec,
                          coords=keys,
                          features=sums / counts[:, None],
                          centers=spec.voxel_centers(keys),
                          counts=counts)


def load_voxel_features(voxel_map: SparseVoxelMap, features_path: str) -> SparseVoxelMap:
    """
    Replace or extend voxel features from text lines `ix iy iz f_1 ... f_C`.
    Every voxel must end up with the same C.
    """
    records: Dict[Tuple[int, int, int], np.ndarray] = {}
    channels = None
    with open(features_path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 4:
                raise FormatError("expected `ix iy iz f_1 ... f_C`", path=features_path, line_number=line_number)
            try:
                key = tuple(int(t) for t in tokens[:3])
                feats = np.array([float(t) for t in tokens[3:]], dtype=np.float64)
            except ValueError as e:
                raise FormatError(str(e), path=features_path, line_number=line_number)
            if channels is None:
                channels = feats.size
            elif feats.size != channels:
                raise FormatError(f"mixed channel counts ({channels} vs {feats.size})",
                                  path=features_path, line_number=line_number)
            if not voxel_map.spec.contains(np.array(key)).all():
                raise FormatError(f"voxel {key} outside extent {voxel_map.spec.extent.tolist()}",
                                  path=features_path, line_number=line_number)
            if key in records:
                raise FormatError(f"duplicate voxel {key}", path=features_path, line_number=line_number)
            if not np.isfinite(feats).all():
                raise FormatError("non-finite feature", path=features_path, line_number=line_number)
            records[key] = feats

    if not records:
        return voxel_map

    existing = voxel_map.lookup()
    if channels != voxel_map.channels and len(voxel_map) and not set(existing) <= set(records):
        raise FormatError(
            f"file has {channels} channels but map has {voxel_map.channels}; "
            "a channel change must cover every existing voxel", path=features_path,
        )

    merged: Dict[Tuple[int, int, int], Tuple[np.ndarray, int]] = {}
    for key, i in existing.items():
        if key in records:
            merged[key] = (records[key], int(voxel_map.counts[i]))
        else:
            merged[key] = (voxel_map.features[i], int(voxel_map.counts[i]))
    for key, feats in records.items():
        merged.setdefault(key, (feats, 0))

    keys = sorted(merged)
    coords = np.array(keys, dtype=np.int64).reshape(-1, 3)
    return SparseVoxelMap(spec=voxel_map.spec,
                          coords=coords,
                          features=np.vstack([merged[k][0] for k in keys]),
                          centers=voxel_map.spec.voxel_centers(coords),
                          counts=np.array([merged[k][1] for k in keys], dtype=np.int64))


def write_voxel_features(voxel_map: SparseVoxelMap, path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for coord, feats in zip(voxel_map.coords, voxel_map.features):
            f.write(" ".join(str(int(c)) for c in coord) + " "
                    + " ".join(repr(float(v)) for v in feats) + "\n")
