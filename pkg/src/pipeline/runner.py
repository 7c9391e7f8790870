# src/pipeline/runner.py

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.augmentation.depth_prior import augment_points, disable_depth_prior
from src.fusion.gated_fusion import (
    Affine, BgrfStageWeights, CascadeOutput, adapt_channels, bgrf_manifest, cascade,
    load_adapter, load_cascade_weights,
)
from src.nn.bundle import TensorSpec, WeightBundle, read_bundle, seeded_init
from src.parsers.depth_raster import read_depth_raster
from src.parsers.kitti_parser import read_calibration, read_labels, read_point_cloud
from src.parsers.volume_dump import write_volume
from src.roi.pointgfe import StageWeights, load_stage_weights, pointgfe_manifest
from src.roi.pooling import RoiFeatures, downsample_manifest, extract_box_features
from src.utils.config import PipelineConfig
from src.utils.errors import PipelineError
from src.utils.geometry import Box3D
from src.utils.spatial_index import GridHashIndex, build_index
from src.voxelization.voxelgrid import SparseVoxelMap, load_voxel_features, voxelize

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def model_manifest(config: PipelineConfig) -> List[TensorSpec]:
    """Every tensor the pipeline reads, in seeded-init draw order."""
    return (pointgfe_manifest(config.gfe)
            + downsample_manifest(config.gfe.out_channels)
            + bgrf_manifest(config.fusion, config.map_channels))


def load_weights(config: PipelineConfig) -> WeightBundle:
    if config.weights_path:
        logger.info("loading weights from %s", config.weights_path)
        return read_bundle(config.weights_path)
    logger.info("no weight file configured; drawing seeded weights (seed=%d)", config.seed)
    return seeded_init(config.seed, model_manifest(config))


@dataclass
class FrameInputs:
    frame_id: str
    points5: np.ndarray
    voxel_map: SparseVoxelMap
    boxes: List[Box3D]
    classes: List[str] = field(default_factory=list)


@dataclass
class BoxResult:
    index: int
    box: Box3D
    seconds: float
    features: Optional[RoiFeatures] = None
    fused: Optional[CascadeOutput] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class PipelineReport:
    manifest: Dict
    failures: int = 0

    @property
    def num_boxes(self) -> int:
        return sum(len(f["boxes"]) for f in self.manifest["frames"])


def load_frame(config: PipelineConfig, frame_id: str) -> FrameInputs:
    """Read, augment and voxelize one frame; format and I/O errors propagate."""
    paths = config.data.frame_paths(frame_id)
    cloud = read_point_cloud(paths.cloud)
    calib = read_calibration(paths.calib)
    raster = read_depth_raster(paths.depth)
    points5 = augment_points(cloud, raster, calib)
    if not config.depth_prior_enabled:
        points5 = disable_depth_prior(points5)

    voxel_map = voxelize(points5, config.grid)
    if paths.voxel_features and os.path.exists(paths.voxel_features):
        voxel_map = load_voxel_features(voxel_map, paths.voxel_features)

    if config.box_source == "config":
        boxes, classes = list(config.boxes), ["Config"] * len(config.boxes)
    else:
        labels = [lab for lab in read_labels(paths.labels, calib) if not lab.dont_care]
        boxes = [lab.box for lab in labels]
        classes = [lab.object_class.value for lab in labels]
    return FrameInputs(frame_id, points5, voxel_map, boxes, classes)


class BoxWorker:
    """Per-frame shared, read-only state plus the per-box computation."""

    def __init__(self, config: PipelineConfig, bundle: WeightBundle, frame: FrameInputs):
        self.config = config
        self.bundle = bundle
        self.frame = frame
        self.index: Optional[GridHashIndex] = (
            build_index(frame.voxel_map.centers, config.roi.grid_query_radius) if len(frame.voxel_map) else None
        )
        self.gfe_stages: List[StageWeights] = load_stage_weights(bundle, config.gfe)
        self.bgrf_stages: List[BgrfStageWeights] = []
        self.adapter: Optional[Affine] = None
        if config.fusion_enabled:
            self.bgrf_stages = load_cascade_weights(bundle)
            self.adapter = load_adapter(bundle)

    def __call__(self, item) -> BoxResult:
        i, box = item
        start = time.perf_counter()
        try:
            feats = extract_box_features(self.frame.points5, self.frame.voxel_map, box, self.bundle,
                                         self.config.roi, self.config.gfe, self.index, self.gfe_stages)
            fused = None
            if self.config.fusion_enabled:
                voxel_volume = feats.voxel_volume
                if self.adapter is not None:
                    voxel_volume = adapt_channels(voxel_volume, self.adapter)
                fused = cascade(voxel_volume, feats.point_volume, self.bgrf_stages, self.config.fusion.gate_mode)
        except (PipelineError, ValueError) as e:
            logger.error("frame %s box %d failed: %s", self.frame.frame_id, i, e)
            return BoxResult(i, box, time.perf_counter() - start, error=str(e))
        return BoxResult(i, box, time.perf_counter() - start, features=feats, fused=fused)


def _dump_box(out_dir: str, frame_id: str, result: BoxResult) -> Dict[str, str]:
    box_dir = os.path.join(out_dir, frame_id, f"box_{result.index:03d}")
    volumes = {"voxel": result.features.voxel_volume, "point": result.features.point_volume}
    if result.fused is not None:
        for s, vol in enumerate(result.fused.stages, start=1):
            volumes[f"stage{s}"] = vol
        volumes["average"] = result.fused.average
    files = {}
    for name, vol in volumes.items():
        path = os.path.join(box_dir, f"{name}.fvol")
        write_volume(path, vol)
        files[name] = os.path.relpath(path, out_dir)
    return files


def run_frame(
    config: PipelineConfig,
    bundle: WeightBundle,
    frame: FrameInputs,
    progress: bool = False,
) -> List[BoxResult]:
    """Boxes run on a thread pool; results come back in box order."""
    worker = BoxWorker(config, bundle, frame)
    items = list(enumerate(frame.boxes))
    if config.jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(tqdm(pool.map(worker, items), total=len(items),
                                desc=f"frame {frame.frame_id}", disable=not progress))
    else:
        results = [worker(item) for item in tqdm(items, desc=f"frame {frame.frame_id}", disable=not progress)]
    return results


def run_pipeline(
    config: PipelineConfig,
    bundle: Optional[WeightBundle] = None,
    frames: Optional[Sequence[str]] = None,
    progress: bool = False,
) -> PipelineReport:
    """
    Extract, fuse and dump RoI features for every configured frame. Volumes go
    to <out_dir>/<frame>/box_<i>/*.fvol and a manifest.json lists every box
    with its timing. Box failures are recorded and the run continues. With
    fusion disabled only the voxel and point volumes are written.
    """
    bundle = bundle if bundle is not None else load_weights(config)
    frame_ids = list(frames) if frames is not None else list(config.data.frames)
    os.makedirs(config.out_dir, exist_ok=True)

    manifest = {"seed": config.seed, "jobs": config.jobs, "fusion": config.fusion_enabled, "frames": []}
    failures = 0
    for frame_id in frame_ids:
        started = time.perf_counter()
        frame = load_frame(config, frame_id)
        prep_seconds = time.perf_counter() - started
        results = run_frame(config, bundle, frame, progress)

        entries = []
        for result in results:
            entry = {
                "index": result.index,
                "box": result.box.to_dict(),
                "class": frame.classes[result.index] if result.index < len(frame.classes) else None,
                "seconds": round(result.seconds, 6),
            }
            if result.ok:
                entry["status"] = "ok"
                entry["num_points"] = result.features.num_points
                entry["files"] = _dump_box(config.out_dir, frame_id, result)
            else:
                failures += 1
                entry["status"] = "failed"
                entry["error"] = result.error
            entries.append(entry)
        manifest["frames"].append({
            "frame_id": frame_id,
            "num_points": int(frame.points5.shape[0]),
            "num_voxels": len(frame.voxel_map),
            "prepare_seconds": round(prep_seconds, 6),
            "boxes": entries,
        })
        logger.info("frame %s: %d boxes, %d failed", frame_id, len(entries),
                    sum(1 for e in entries if e["status"] != "ok"))

    with open(os.path.join(config.out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return PipelineReport(manifest, failures)
