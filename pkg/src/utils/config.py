# src/utils/config.py

import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional

import yaml

from src.fusion.gated_fusion import FusionConfig
from src.roi.pointgfe import PointGFEConfig
from src.roi.pooling import RoiPoolConfig
from src.utils.errors import ConfigError
from src.utils.geometry import Box3D
from src.voxelization.voxelgrid import GridSpec, KITTI_POINT_CLOUD_RANGE, KITTI_VOXEL_SIZE

DEFAULT_CONFIG_PATH = os.path.join("config", "config.yaml")
BOX_SOURCES = ("labels", "config")


class FramePaths(NamedTuple):
    cloud: str
    calib: str
    depth: str
    labels: str
    voxel_features: Optional[str]


@dataclass(frozen=True)
class DataConfig:
    root: str = "data/kitti"
    frames: List[str] = field(default_factory=list)
    velodyne_dir: str = "velodyne"
    calib_dir: str = "calib"
    label_dir: str = "label_2"
    depth_dir: str = "depth"
    voxel_features_dir: Optional[str] = None

    def frame_paths(self, frame_id: str) -> FramePaths:
        def join(sub, ext):
            return os.path.join(self.root, sub, f"{frame_id}.{ext}")
        return FramePaths(
            cloud=join(self.velodyne_dir, "bin"),
            calib=join(self.calib_dir, "txt"),
            depth=join(self.depth_dir, "dpr"),
            labels=join(self.label_dir, "txt"),
            voxel_features=join(self.voxel_features_dir, "txt") if self.voxel_features_dir else None,
        )


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridSpec = field(default_factory=GridSpec.kitti)
    map_channels: int = 5
    depth_prior_enabled: bool = True
    fusion_enabled: bool = True
    gfe: PointGFEConfig = field(default_factory=PointGFEConfig)
    roi: RoiPoolConfig = field(default_factory=RoiPoolConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0
    jobs: int = 1
    out_dir: str = "data/processed/features"
    weights_path: Optional[str] = None
    box_source: str = "labels"
    boxes: List[Box3D] = field(default_factory=list)

    def __post_init__(self):
        if self.fusion.channels != self.gfe.out_channels:
            raise ConfigError(
                f"fusion works on {self.fusion.channels} channels but PointGFE emits {self.gfe.out_channels}"
            )
        if self.map_channels < 1:
            raise ConfigError(f"voxel_grid.feature_channels must be >= 1, got {self.map_channels}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.box_source not in BOX_SOURCES:
            raise ConfigError(f"box_source must be one of {BOX_SOURCES}, got {self.box_source!r}")

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """Replace the fields given as non-None keyword arguments."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes) if changes else self


def _section(raw: Dict, name: str) -> Dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    return value


def _parse_boxes(rows: Any) -> List[Box3D]:
    boxes = []
    for i, row in enumerate(rows or []):
        if not isinstance(row, (list, tuple)) or len(row) != 7:
            raise ConfigError(f"boxes[{i}] must be [cx, cy, cz, l, w, h, yaw], got {row!r}")
        try:
            boxes.append(Box3D(*(float(v) for v in row)))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"boxes[{i}]: {e}")
    return boxes


def config_from_dict(raw: Optional[Dict]) -> PipelineConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    data = _section(raw, "data")
    grid = _section(raw, "voxel_grid")
    prior = _section(raw, "depth_prior")
    gfe = _section(raw, "pointgfe")
    roi = _section(raw, "roi_pooling")
    fusion = _section(raw, "fusion")
    pipeline = _section(raw, "pipeline")

    try:
        gfe_cfg = PointGFEConfig(
            radius=float(gfe.get("radius", 0.8)),
            k=int(gfe.get("k", 9)),
            stage_widths=tuple(gfe.get("stage_widths", (32, 32, 64))),
        )
        return PipelineConfig(
            data=DataConfig(
                root=str(data.get("root", "data/kitti")),
                frames=[str(f) for f in data.get("frames") or []],
                velodyne_dir=data.get("velodyne_dir", "velodyne"),
                calib_dir=data.get("calib_dir", "calib"),
                label_dir=data.get("label_dir", "label_2"),
                depth_dir=data.get("depth_dir", "depth"),
                voxel_features_dir=data.get("voxel_features_dir"),
            ),
            grid=GridSpec.from_range(grid.get("point_cloud_range", KITTI_POINT_CLOUD_RANGE),
                                     grid.get("voxel_size", KITTI_VOXEL_SIZE)),
            map_channels=int(grid.get("feature_channels", 5)),
            depth_prior_enabled=bool(prior.get("enabled", True)),
            gfe=gfe_cfg,
            roi=RoiPoolConfig(
                n=int(roi.get("n", 6)),
                m=int(roi.get("m", 12)),
                grid_query_radius=float(roi.get("grid_query_radius", 0.8)),
                grid_query_k=int(roi.get("grid_query_k", 16)),
                margin=float(roi.get("margin", 0.2)),
            ),
            fusion=FusionConfig(
                channels=gfe_cfg.out_channels,
                unify_channels=int(fusion.get("unify_channels", 64)),
                gate_hidden=int(fusion.get("gate_hidden", 64)),
                refine_depth=int(fusion.get("refine_depth", 1)),
                gate_mode=fusion.get("gate_mode", "sigmoid"),
            ),
            fusion_enabled=bool(fusion.get("enabled", True)),
            seed=int(pipeline.get("seed", 0)),
            jobs=int(pipeline.get("jobs", 1)),
            out_dir=str(pipeline.get("out_dir", "data/processed/features")),
            weights_path=pipeline.get("weights"),
            box_source=str(pipeline.get("box_source", "labels")),
            boxes=_parse_boxes(raw.get("boxes")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}")


def load_config(path: str = DEFAULT_CONFIG_PATH) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}")
    try:
        return config_from_dict(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}")
