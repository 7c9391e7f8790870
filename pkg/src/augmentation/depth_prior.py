# src/augmentation/depth_prior.py

import logging
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from src.parsers.depth_raster import DepthRaster
from src.parsers.kitti_parser import CalibrationSet, POINT5_DIMS
from src.utils.errors import OutOfBoundsError
from src.utils.geometry import lidar_to_rect, project_rect

logger = logging.getLogger(__name__)

# d_da value for points without a usable projection
NO_PRIOR = 0.0


def _bilinear(raster: DepthRaster, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # pixel centers sit on integer coordinates; "nearest" only matters on the
    # last row/column where the far neighbour has zero weight
    coords = np.vstack([np.asarray(v, dtype=np.float64), np.asarray(u, dtype=np.float64)])
    return map_coordinates(raster.data.astype(np.float64), coords, order=1, mode="nearest")


def in_raster(raster: DepthRaster, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (u >= 0) & (u <= raster.width - 1) & (v >= 0) & (v <= raster.height - 1)


def sample_depth(raster: DepthRaster, u: float, v: float) -> float:
    """Bilinear sample with pixel (i, j) centered at (u=i, v=j)."""
    if not in_raster(raster, u, v):
        raise OutOfBoundsError(
            f"(u={u}, v={v}) outside [0, {raster.width - 1}] x [0, {raster.height - 1}]"
        )
    return float(_bilinear(raster, [u], [v])[0])


def project_to_raster(
    xyz: np.ndarray,
    raster: DepthRaster,
    calib: CalibrationSet,
) -> Tuple[np.ndarray, np.ndarray]:
    """Project LiDAR points; returns (uv, valid) where valid = in front of camera and in-bounds."""
    rect = lidar_to_rect(np.asarray(xyz, dtype=np.float64).reshape(-1, 3), calib)
    uv, depth = project_rect(rect, calib.P)
    valid = depth > 0
    valid[valid] = in_raster(raster, uv[valid, 0], uv[valid, 1])
    return uv, valid


def augment_points(
    points: np.ndarray,
    raster: DepthRaster,
    calib: CalibrationSet,
) -> np.ndarray:
    """
    Append the sampled depth prior to every LiDAR point: (N, 4) -> (N, 5).
    Points behind the camera or outside the raster keep d_da = 0; no point is dropped.
    """
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    out = np.zeros((pts.shape[0], POINT5_DIMS), dtype=np.float32)
    out[:, :4] = pts
    if pts.shape[0] == 0:
        return out

    uv, valid = project_to_raster(pts[:, :3], raster, calib)
    if valid.any():
        out[valid, 4] = _bilinear(raster, uv[valid, 0], uv[valid, 1])
    logger.debug("depth prior sampled for %d / %d points", int(valid.sum()), pts.shape[0])
    return out


def disable_depth_prior(points5: np.ndarray) -> np.ndarray:
    """Ablation: keep the 5-column layout but zero every d_da."""
    out = np.array(points5, dtype=np.float32, copy=True)
    out[:, 4] = NO_PRIOR
    return out
