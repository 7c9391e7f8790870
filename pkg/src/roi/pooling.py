# src/roi/pooling.py

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from src.nn.bundle import TensorSpec, WeightBundle
from src.nn.functional import conv3d_forward, relu
from src.roi.pointgfe import PointGFEConfig, StageWeights, load_stage_weights, pointgfe_stack
from src.utils.errors import ShapeError
from src.utils.geometry import Box3D, box_local_to_world, canonicalize, points_in_box
from src.utils.spatial_index import GridHashIndex, ball_query_many, build_index, neighbor_counts
from src.voxelization.voxelgrid import SparseVoxelMap

logger = logging.getLogger(__name__)

DOWNSAMPLE_W = "roi.downsample.W"
DOWNSAMPLE_B = "roi.downsample.b"


class VolumeTag(Enum):
    VOXEL_PATH = "voxel_path"
    POINT_PATH = "point_path"
    FUSED = "fused"


@dataclass(frozen=True)
class FeatureVolume:
    """
    Dense RoI feature block indexed [c, ix, iy, iz] along the box-local axes.
    """
    data: np.ndarray
    tag: VolumeTag

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 4 or not (arr.shape[1] == arr.shape[2] == arr.shape[3]):
            raise ShapeError(f"feature volume must be (C, g, g, g), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature volume has non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "tag", VolumeTag(self.tag))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def grid(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def zeros(cls, channels: int, grid: int, tag: VolumeTag) -> "FeatureVolume":
        return cls(np.zeros((channels, grid, grid, grid)), tag)


@dataclass(frozen=True)
class RoiPoolConfig:
    n: int = 6
    m: int = 12
    grid_query_radius: float = 0.8
    grid_query_k: int = 16
    margin: float = 0.2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid resolution n must be >= 1, got {self.n}")
        if self.m != 2 * self.n:
            raise ValueError(f"sub-voxel resolution m must equal 2n (stride-2 downsampler), got m={self.m}, n={self.n}")
        if self.grid_query_radius <= 0 or self.grid_query_k < 1:
            raise ValueError("grid query needs radius > 0 and k >= 1")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


class RoiFeatures(NamedTuple):
    voxel_volume: FeatureVolume
    point_volume: FeatureVolume
    num_points: int


def downsample_manifest(channels: int, out_channels: Optional[int] = None) -> List[TensorSpec]:
    cout = out_channels or channels
    return [TensorSpec(DOWNSAMPLE_W, (cout, channels, 2, 2, 2)),
            TensorSpec(DOWNSAMPLE_B, (cout,), fan_in=channels * 8)]


# ─── Voxel path: RoI Grid Pooling ──────────────────────────────────────────────

def roi_grid_points(box: Box3D, n: int) -> np.ndarray:
    """Centers of the n^3 box partition in world coordinates, local x fastest, then y, then z."""
    iz, iy, ix = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    cells = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1).astype(np.float64)
    local = ((cells + 0.5) / n - 0.5) * box.dims
    return box_local_to_world(local, box)


def _to_volume(rows: np.ndarray, n: int) -> np.ndarray:
    # rows are in x-fastest order: reshape to [iz, iy, ix, c] then reorder to [c, ix, iy, iz]
    return rows.reshape(n, n, n, -1).transpose(3, 2, 1, 0)


def roi_grid_pool(
    voxel_map: SparseVoxelMap,
    box: Box3D,
    cfg: RoiPoolConfig,
    index: Optional[GridHashIndex] = None,
) -> FeatureVolume:
    """Mean of the in-radius voxel features (first k by voxel order) at every grid point."""
    n, channels = cfg.n, voxel_map.channels
    if len(voxel_map) == 0:
        return FeatureVolume.zeros(channels, n, VolumeTag.VOXEL_PATH)
    if index is None:
        index = build_index(voxel_map.centers, cfg.grid_query_radius)

    grid = roi_grid_points(box, n)
    nbr = ball_query_many(index, grid, cfg.grid_query_radius, cfg.grid_query_k)
    counts = neighbor_counts(nbr)
    rows = np.zeros((grid.shape[0], channels), dtype=np.float64)
    for slot in range(nbr.shape[1]):
        take = counts > slot
        rows[take] += voxel_map.features[nbr[take, slot]]
    hit = counts > 0
    rows[hit] /= counts[hit, None]
    return FeatureVolume(_to_volume(rows, n), VolumeTag.VOXEL_PATH)


# ─── Point path: RoI Aware Pooling ─────────────────────────────────────────────

def sub_voxel_indices(canonical_positions: np.ndarray, box_dims: Sequence[float], m: int) -> np.ndarray:
    """Sub-voxel (ix, iy, iz) per canonical point; margin points clamp to boundary cells."""
    pos = np.asarray(canonical_positions, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(box_dims, dtype=np.float64)
    idx = np.floor((pos + dims / 2.0) / (dims / m)).astype(np.int64)
    return np.clip(idx, 0, m - 1)


def roi_aware_pool(
    canonical_positions: np.ndarray,
    embeddings: np.ndarray,
    box_dims: Sequence[float],
    m: int,
) -> FeatureVolume:
    """Elementwise max of member embeddings per sub-voxel; empty sub-voxels are zero."""
    emb = np.asarray(embeddings, dtype=np.float64)
    pos = np.asarray(canonical_positions, dtype=np.float64).reshape(-1, 3)
    if emb.ndim != 2 or emb.shape[0] != pos.shape[0]:
        raise ShapeError(f"{pos.shape[0]} positions but embeddings of shape {emb.shape}")
    channels = emb.shape[1]
    pooled = np.full((m ** 3, channels), -np.inf)
    if pos.shape[0]:
        idx = sub_voxel_indices(pos, box_dims, m)
        flat = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
        np.maximum.at(pooled, flat, emb)
    pooled[np.isneginf(pooled[:, 0])] = 0.0
    # flat index is ix-major, so the reshape lands directly on [ix, iy, iz, c]
    return FeatureVolume(pooled.reshape(m, m, m, channels).transpose(3, 0, 1, 2), VolumeTag.POINT_PATH)


def downsample_volume(volume: FeatureVolume, kernel: np.ndarray, bias: np.ndarray) -> FeatureVolume:
    """Stride-2 2x2x2 convolution + ReLU: m^3 -> (m/2)^3."""
    if volume.grid % 2:
        raise ShapeError(f"downsampling needs an even grid, got {volume.grid}")
    if np.shape(kernel)[2:] != (2, 2, 2):
        raise ShapeError(f"downsample kernel must be (Cout, Cin, 2, 2, 2), got {np.shape(kernel)}")
    out = relu(conv3d_forward(kernel, bias, volume.data, stride=2, padding=0))
    return FeatureVolume(out, VolumeTag.POINT_PATH)


# ─── Dual-path orchestration ───────────────────────────────────────────────────

def extract_box_features(
    points5: np.ndarray,
    voxel_map: SparseVoxelMap,
    box: Box3D,
    bundle: WeightBundle,
    cfg: RoiPoolConfig,
    gfe_cfg: PointGFEConfig,
    index: Optional[GridHashIndex] = None,
    stages: Optional[List[StageWeights]] = None,
) -> RoiFeatures:
    """
    Point path: crop (enlarged box) -> canonicalize -> PointGFE on (x', y', z', r, d_da)
    -> aware pool (m^3) -> downsample (n^3). Voxel path: grid pool (n^3).
    """
    pts = np.asarray(points5, dtype=np.float64)
    voxel_volume = roi_grid_pool(voxel_map, box, cfg, index)

    members = points_in_box(pts[:, :3], box, cfg.margin)
    kernel = bundle.get(DOWNSAMPLE_W)
    bias = bundle.get(DOWNSAMPLE_B)
    if members.size == 0:
        logger.info("RoI %s holds no points; point volume is zero", box.to_dict())
        point_volume = FeatureVolume.zeros(kernel.shape[0], cfg.n, VolumeTag.POINT_PATH)
        return RoiFeatures(voxel_volume, point_volume, 0)

    canonical = canonicalize(pts[members, :3], box)
    local_points = np.hstack([canonical, pts[members, 3:]])
    stages = stages if stages is not None else load_stage_weights(bundle, gfe_cfg)
    embedding = pointgfe_stack(local_points, gfe_cfg, bundle, stages)
    fine = roi_aware_pool(canonical, embedding, box.dims, cfg.m)
    point_volume = downsample_volume(fine, kernel, bias)
    return RoiFeatures(voxel_volume, point_volume, int(members.size))


def extract_roi_features(
    points5: np.ndarray,
    voxel_map: SparseVoxelMap,
    boxes: Sequence[Box3D],
    bundle: WeightBundle,
    cfg: RoiPoolConfig,
    gfe_cfg: PointGFEConfig,
) -> List[RoiFeatures]:
    index = build_index(voxel_map.centers, cfg.grid_query_radius) if len(voxel_map) else None
    stages = load_stage_weights(bundle, gfe_cfg)
    return [extract_box_features(points5, voxel_map, box, bundle, cfg, gfe_cfg, index, stages)
            for box in boxes]
