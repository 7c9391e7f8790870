# src/parsers/kitti_parser.py

import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from src.utils.errors import FormatError, MissingCalibError
from src.utils.geometry import Box3D, lidar_to_rect, normalize_yaw, rect_to_lidar

logger = logging.getLogger(__name__)

RAW_POINT_DIMS = 4     # x, y, z, r
POINT5_DIMS = 5        # x, y, z, r, d_da
_FLOAT_LE = np.dtype("<f4")

CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


class ObjectClass(Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    OTHER = "Other"

    @classmethod
    def from_kitti(cls, name: str) -> "ObjectClass":
        for member in cls:
            if member.value == name and member is not cls.OTHER:
                return member
        return cls.OTHER


class Difficulty(Enum):
    EASY = "Easy"
    MODERATE = "Moderate"
    HARD = "Hard"
    UNKNOWN = "Unknown"
    DONT_CARE = "DontCare"


@dataclass(frozen=True)
class CalibrationSet:
    """
    KITTI camera/LiDAR calibration.
      P  : 3x4 rectified camera projection (pixels)
      R0 : 3x3 rectification rotation
      Tr : 3x4 LiDAR -> camera rigid transform
    """
    P: np.ndarray
    R0: np.ndarray
    Tr: np.ndarray

    def __post_init__(self):
        for name, shape in (("P", (3, 4)), ("R0", (3, 3)), ("Tr", (3, 4))):
            mat = np.array(getattr(self, name), dtype=np.float64)
            if mat.shape != shape:
                raise ValueError(f"CalibrationSet.{name} must be {shape}, got {mat.shape}")
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)

    @classmethod
    def identity(cls) -> "CalibrationSet":
        eye34 = np.hstack([np.eye(3), np.zeros((3, 1))])
        return cls(P=eye34, R0=np.eye(3), Tr=eye34)

    def check(self) -> None:
        """Raise ValueError when R0 is not orthonormal (1e-3) or P[2][2] is zero."""
        if not np.allclose(self.R0.T @ self.R0, np.eye(3), atol=1e-3):
            raise ValueError("R0_rect is not orthonormal within 1e-3")
        if self.P[2, 2] == 0:
            raise ValueError("P2[2][2] must be nonzero")


@dataclass
class LabeledBox:
    box: Optional[Box3D]
    object_class: ObjectClass
    kitti_type: str
    difficulty: Difficulty = Difficulty.UNKNOWN
    truncation: float = 0.0
    occlusion: int = 0
    dont_care: bool = False
    bbox2d: Optional[List[float]] = None

    def to_dict(self) -> Dict:
        return {
            "box": self.box.to_dict() if self.box is not None else None,
            "class": self.object_class.value,
            "kitti_type": self.kitti_type,
            "difficulty": self.difficulty.value,
            "dont_care": self.dont_care,
        }


# ─── Velodyne point clouds ─────────────────────────────────────────────────────

def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def read_point_cloud(path: str, dims: int = RAW_POINT_DIMS) -> np.ndarray:
    """
    Read packed little-endian float32 records (x, y, z, r[, d_da]).
    Returns an (N, dims) float32 array in file order.
    """
    record_bytes = dims * _FLOAT_LE.itemsize
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) % record_bytes:
        raise FormatError(
            f"file length {len(buf)} is not a multiple of {record_bytes} bytes", path=path
        )
    points = np.frombuffer(buf, dtype=_FLOAT_LE).reshape(-1, dims)
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if bad.size:
        raise FormatError("non-finite value", path=path, record_index=int(bad[0]))
    return points.astype(np.float32)


def write_point_cloud(path: str, points: np.ndarray) -> None:
    arr = np.ascontiguousarray(points, dtype=_FLOAT_LE)
    if arr.ndim != 2:
        raise ValueError(f"point cloud must be 2-D, got shape {arr.shape}")
    _ensure_parent(path)
    arr.tofile(path)


# ─── Calibration ───────────────────────────────────────────────────────────────

def _parse_floats(tokens: List[str], path: str, line_number: int) -> List[float]:
    values = []
    for tok in tokens:
        try:
            values.append(float(tok))
        except ValueError:
            raise FormatError(f"not a decimal number: {tok!r}", path=path, line_number=line_number)
    return values


def read_calibration(path: str) -> CalibrationSet:
    """Parse a KITTI calib txt (`KEY: v1 v2 ...`) for P2, R0_rect and Tr_velo_to_cam."""
    found: Dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if ":" not in line:
                continue
            key, _, rest = line.partition(":")
            key = key.strip()
            if key not in CALIB_KEYS:
                continue
            shape = CALIB_KEYS[key]
            values = _parse_floats(rest.split(), path, line_number)
            if len(values) != shape[0] * shape[1]:
                raise FormatError(
                    f"{key} needs {shape[0] * shape[1]} values, got {len(values)}",
                    path=path, line_number=line_number,
                )
            found[key] = np.array(values, dtype=np.float64).reshape(shape)

    for key in CALIB_KEYS:
        if key not in found:
            raise MissingCalibError(key, path=path)

    calib = CalibrationSet(P=found["P2"], R0=found["R0_rect"], Tr=found["Tr_velo_to_cam"])
    try:
        calib.check()
    except ValueError as e:
        raise FormatError(str(e), path=path)
    return calib


def write_calibration(path: str, calib: CalibrationSet) -> None:
    _ensure_parent(path)
    rows = {"P2": calib.P, "R0_rect": calib.R0, "Tr_velo_to_cam": calib.Tr}
    with open(path, "w", encoding="utf-8") as f:
        for key, mat in rows.items():
            f.write(f"{key}: " + " ".join(repr(float(v)) for v in mat.ravel()) + "\n")


# ─── Labels ────────────────────────────────────────────────────────────────────

def _difficulty(bbox2d: List[float], truncation: float, occlusion: int) -> Difficulty:
    height = bbox2d[3] - bbox2d[1] + 1
    if height >= 40 and truncation <= 0.15 and occlusion <= 0:
        return Difficulty.EASY
    if height >= 25 and truncation <= 0.3 and occlusion <= 1:
        return Difficulty.MODERATE
    if height >= 25 and truncation <= 0.5 and occlusion <= 2:
        return Difficulty.HARD
    return Difficulty.UNKNOWN


def camera_yaw_to_lidar(ry: float) -> float:
    """KITTI ry (about camera +y, pointing down) -> yaw about LiDAR +z from +x."""
    return normalize_yaw(-ry - math.pi / 2)


def parse_label_line(line: str, calib: CalibrationSet, line_number: int = 0,
                     path: Optional[str] = None) -> LabeledBox:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise FormatError(f"expected 15 or 16 columns, got {len(fields)}",
                          path=path, line_number=line_number)
    kitti_type = fields[0]
    nums = _parse_floats(fields[1:15], path, line_number)
    truncation, occlusion = nums[0], int(nums[1])
    bbox2d = nums[3:7]
    h, w, l = nums[7:10]
    loc_cam = np.array(nums[10:13])
    ry = nums[13]

    if kitti_type == "DontCare":
        return LabeledBox(box=None, object_class=ObjectClass.OTHER, kitti_type=kitti_type,
                          difficulty=Difficulty.DONT_CARE, truncation=truncation,
                          occlusion=occlusion, dont_care=True, bbox2d=bbox2d)

    bottom = rect_to_lidar(loc_cam, calib)
    try:
        box = Box3D(bottom[0], bottom[1], bottom[2] + h / 2.0, l, w, h, camera_yaw_to_lidar(ry))
    except ValueError as e:
        raise FormatError(str(e), path=path, line_number=line_number)
    return LabeledBox(
        box=box,
        object_class=ObjectClass.from_kitti(kitti_type),
        kitti_type=kitti_type,
        difficulty=_difficulty(bbox2d, truncation, occlusion),
        truncation=truncation,
        occlusion=occlusion,
        bbox2d=bbox2d,
    )


def read_labels(path: str, calib: CalibrationSet) -> List[LabeledBox]:
    """
    Read a KITTI label file. Boxes come back in the LiDAR frame with the
    center at the geometric box center (KITTI stores the bottom center).
    """
    labels: List[LabeledBox] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            labels.append(parse_label_line(line, calib, line_number, path))
    return labels


def format_label_line(label: LabeledBox, calib: CalibrationSet) -> str:
    bbox = label.bbox2d or [0.0, 0.0, 50.0, 50.0]
    if label.box is None:
        return (f"DontCare -1 -1 -10 {bbox[0]:.2f} {bbox[1]:.2f} {bbox[2]:.2f} {bbox[3]:.2f} "
                "-1 -1 -1 -1000 -1000 -1000 -10")
    box = label.box
    bottom = np.array([box.cx, box.cy, box.cz - box.h / 2.0])
    loc = lidar_to_rect(bottom, calib)
    ry = normalize_yaw(-box.yaw - math.pi / 2)
    alpha = normalize_yaw(ry - math.atan2(loc[0], loc[2]))
    return (f"{label.kitti_type} {label.truncation:.2f} {label.occlusion:d} {alpha:.6f} "
            f"{bbox[0]:.2f} {bbox[1]:.2f} {bbox[2]:.2f} {bbox[3]:.2f} "
            f"{box.h:.6f} {box.w:.6f} {box.l:.6f} {loc[0]:.6f} {loc[1]:.6f} {loc[2]:.6f} {ry:.6f}")


def write_labels(path: str, labels: List[LabeledBox], calib: CalibrationSet) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for label in labels:
            f.write(format_label_line(label, calib) + "\n")
