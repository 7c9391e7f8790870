# src/utils/geometry.py

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Sequence, Tuple

import numpy as np

from src.utils.errors import BehindCameraError

if TYPE_CHECKING:
    from src.parsers.kitti_parser import CalibrationSet

# Enlargement applied to every half-extent before cropping RoI points (meters)
DEFAULT_MARGIN = 0.2


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(yaw, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0],
                      [s, c, 0.0],
                      [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True)
class Box3D:
    """
    Oriented RoI in the LiDAR frame.
    (cx, cy, cz) is the geometric center, (l, w, h) the extent along the
    box-local x, y, z axes and yaw the counterclockwise angle from +x about +z.
    """
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Box3D.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box3D dimensions must be positive, got ({self.l}, {self.w}, {self.h})")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h], dtype=np.float64)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise ValueError(f"expected 7 box values (cx cy cz l w h yaw), got {len(values)}")
        return cls(*[float(v) for v in values])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")}


class PixelCoord(NamedTuple):
    u: float
    v: float
    depth_cam: float


def rotate_points(points: np.ndarray, theta: float) -> np.ndarray:
    """Rotate (N, 3) points about the origin's up axis by theta."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ rotation_z(theta).T


def rotate_box(box: Box3D, theta: float) -> Box3D:
    cx, cy, cz = rotate_points(box.center, theta)[0]
    return Box3D(cx, cy, cz, box.l, box.w, box.h, box.yaw + theta)


# ─── Calibration chain ─────────────────────────────────────────────────────────

def _to_homogeneous(points: np.ndarray) -> np.ndarray:
    return np.hstack([points, np.ones((points.shape[0], 1), dtype=np.float64)])


def lidar_to_rect(points: np.ndarray, calib: "CalibrationSet") -> np.ndarray:
    """
    LiDAR frame -> rectified camera frame: R0 · Tr · [p; 1].
    Accepts a single 3-vector or an (N, 3) array and returns the same rank.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    rect = _to_homogeneous(flat) @ calib.Tr.T @ calib.R0.T
    return rect.reshape(pts.shape)


def rect_to_lidar(points: np.ndarray, calib: "CalibrationSet") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    ref = np.linalg.solve(calib.R0, flat.T).T
    velo_to_cam = np.vstack([calib.Tr, [0.0, 0.0, 0.0, 1.0]])
    lidar = _to_homogeneous(ref) @ np.linalg.inv(velo_to_cam).T
    return lidar[:, :3].reshape(pts.shape)


def project_rect(points: np.ndarray, P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised projection of (N, 3) rectified points.
    Returns (uv, depth_cam); uv is NaN wherever depth_cam <= 0.
    """
    flat = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    proj = _to_homogeneous(flat) @ np.asarray(P, dtype=np.float64).T
    depth = proj[:, 2]
    uv = np.full((flat.shape[0], 2), np.nan)
    front = depth > 0
    uv[front] = proj[front, :2] / depth[front, None]
    return uv, depth


def rect_to_image(p_rect: Sequence[float], P: np.ndarray) -> PixelCoord:
    uv, depth = project_rect(np.asarray(p_rect, dtype=np.float64).reshape(1, 3), P)
    if not depth[0] > 0:
        raise BehindCameraError(f"point {tuple(p_rect)} has camera depth {depth[0]:.6g}")
    return PixelCoord(float(uv[0, 0]), float(uv[0, 1]), float(depth[0]))


def image_to_rect(u: float, v: float, depth_cam: float, P: np.ndarray) -> np.ndarray:
    """Inverse of rect_to_image at a known camera depth."""
    P = np.asarray(P, dtype=np.float64)
    rhs = depth_cam * np.array([u, v, 1.0]) - P[:, 3]
    return np.linalg.solve(P[:, :3], rhs)


# ─── Box membership & canonical frame ──────────────────────────────────────────

def canonicalize(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Rz(-yaw) · (p - center): box center to the origin, box axes to x/y/z."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # row form of Rz(-yaw) · d is d · Rz(yaw)
    return (pts - box.center) @ rotation_z(box.yaw)


def box_local_to_world(local: np.ndarray, box: Box3D) -> np.ndarray:
    pts = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    return pts @ rotation_z(box.yaw).T + box.center


def points_in_box(points: np.ndarray, box: Box3D, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Indices of points inside the closed box enlarged by margin on every half-extent."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    local = canonicalize(points, box)
    half = box.dims / 2.0 + margin
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.flatnonzero(inside)
