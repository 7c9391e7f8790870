# src/pipeline/synthetic.py
"""
Seeded KITTI-shaped frames for tests, benchmarks and self-checks.

Objects sit on a flat ground plane in front of the sensor. Their points are
drawn inside the box with class-specific reflectance; the background is a
noisy ground plane with uniform reflectance that stays clear of every box.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.parsers.depth_raster import DepthRaster, write_depth_raster
from src.parsers.kitti_parser import (
    CalibrationSet, LabeledBox, ObjectClass, write_calibration, write_labels, write_point_cloud,
)
from src.utils.config import DataConfig, FramePaths
from src.utils.geometry import Box3D, box_local_to_world, lidar_to_rect, points_in_box, project_rect

logger = logging.getLogger(__name__)

IMAGE_WIDTH = 1242
IMAGE_HEIGHT = 375
SENSOR_HEIGHT = 1.73
MAX_DEPTH = 80.0

# typical KITTI object sizes (l, w, h)
CLASS_DIMS = {
    ObjectClass.CAR: (3.9, 1.6, 1.56),
    ObjectClass.PEDESTRIAN: (0.8, 0.6, 1.73),
    ObjectClass.CYCLIST: (1.76, 0.6, 1.73),
}

DEFAULT_REFLECTANCE = {
    ObjectClass.CAR: (0.0, 0.1),
    ObjectClass.PEDESTRIAN: (0.1, 0.4),
    ObjectClass.CYCLIST: (0.1, 0.4),
}


def kitti_like_calibration() -> CalibrationSet:
    """Sequence-00 style P2 with a level LiDAR mounted at the camera."""
    P = [[721.5377, 0.0, 609.5593, 44.85728],
         [0.0, 721.5377, 172.854, 0.2163791],
         [0.0, 0.0, 1.0, 0.002745884]]
    Tr = [[0.0, -1.0, 0.0, 0.0],
          [0.0, 0.0, -1.0, -0.08],
          [1.0, 0.0, 0.0, -0.27]]
    return CalibrationSet(P=P, R0=np.eye(3), Tr=Tr)


def ground_depth_raster(calib: CalibrationSet, width: int = IMAGE_WIDTH, height: int = IMAGE_HEIGHT) -> DepthRaster:
    """Camera depth of the ground plane below the horizon, MAX_DEPTH above it."""
    fy, cy = calib.P[1, 1], calib.P[1, 2]
    v = np.arange(height, dtype=np.float64)[:, None] + np.zeros((1, width))
    below = v - cy
    depth = np.full_like(v, MAX_DEPTH)
    ground = below > 0
    depth[ground] = np.minimum(fy * SENSOR_HEIGHT / below[ground], MAX_DEPTH)
    return DepthRaster(depth.astype(np.float32))


@dataclass
class Scene:
    points: np.ndarray
    calib: CalibrationSet
    raster: DepthRaster
    labels: List[LabeledBox] = field(default_factory=list)

    @property
    def boxes(self) -> List[Box3D]:
        return [lab.box for lab in self.labels if lab.box is not None]


def box_corners(box: Box3D) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    return box_local_to_world(signs * box.dims / 2.0, box)


def _bbox2d(box: Box3D, calib: CalibrationSet) -> List[float]:
    uv, _ = project_rect(lidar_to_rect(box_corners(box), calib), calib.P)
    uv = uv[np.isfinite(uv).all(axis=1)]
    if uv.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    lo = np.clip(uv.min(axis=0), 0, [IMAGE_WIDTH - 1, IMAGE_HEIGHT - 1])
    hi = np.clip(uv.max(axis=0), 0, [IMAGE_WIDTH - 1, IMAGE_HEIGHT - 1])
    return [float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])]


def _object_points(rng: np.random.Generator, box: Box3D, count: int, r_range: Tuple[float, float]) -> np.ndarray:
    local = (rng.random((count, 3)) - 0.5) * 0.95 * box.dims
    xyz = box_local_to_world(local, box)
    r = rng.uniform(r_range[0], r_range[1], size=(count, 1))
    return np.hstack([xyz, r])


def make_scene(
    seed: int = 0,
    num_objects: int = 3,
    points_per_object: int = 200,
    background_points: int = 2000,
    reflectance: Optional[Dict[ObjectClass, Tuple[float, float]]] = None,
) -> Scene:
    """
    Objects cycle Car, Pedestrian, Cyclist and are placed 8-35 m ahead without
    overlapping. Returns float32 (N, 4) points.
    """
    rng = np.random.default_rng(seed)
    ranges = dict(DEFAULT_REFLECTANCE)
    ranges.update(reflectance or {})
    calib = kitti_like_calibration()
    classes = [ObjectClass.CAR, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST]

    labels: List[LabeledBox] = []
    chunks = []
    for i in range(num_objects):
        cls = classes[i % len(classes)]
        l, w, h = CLASS_DIMS[cls]
        for _ in range(100):
            cx, cy = rng.uniform(8.0, 35.0), rng.uniform(-8.0, 8.0)
            if all(math.hypot(cx - b.box.cx, cy - b.box.cy) > 5.0 for b in labels):
                break
        box = Box3D(cx, cy, -SENSOR_HEIGHT + h / 2.0, l, w, h, rng.uniform(-math.pi, math.pi))
        labels.append(LabeledBox(box=box, object_class=cls, kitti_type=cls.value,
                                 bbox2d=_bbox2d(box, calib)))
        chunks.append(_object_points(rng, box, points_per_object, ranges[cls]))

    ground = np.column_stack([
        rng.uniform(2.0, 60.0, background_points),
        rng.uniform(-30.0, 30.0, background_points),
        -SENSOR_HEIGHT + rng.normal(0.0, 0.02, background_points),
        rng.random(background_points),
    ])
    clear = np.ones(background_points, dtype=bool)
    for lab in labels:
        clear[points_in_box(ground[:, :3], lab.box, margin=0.3)] = False
    chunks.append(ground[clear])

    points = np.vstack(chunks).astype(np.float32)
    return Scene(points=points, calib=calib, raster=ground_depth_raster(calib), labels=labels)


def write_scene(scene: Scene, root: str, frame_id: str = "000000",
                data: Optional[DataConfig] = None) -> FramePaths:
    """Write one frame in the KITTI object layout under root."""
    layout = data or DataConfig(root=root)
    if layout.root != root:
        layout = replace(layout, root=root)
    paths = layout.frame_paths(frame_id)
    write_point_cloud(paths.cloud, scene.points)
    write_calibration(paths.calib, scene.calib)
    write_depth_raster(paths.depth, scene.raster)
    write_labels(paths.labels, scene.labels, scene.calib)
    logger.debug("wrote synthetic frame %s under %s", frame_id, root)
    return paths
