# src/pipeline/bench.py

import logging
import time
from collections import defaultdict
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.augmentation.depth_prior import augment_points, disable_depth_prior
from src.fusion.gated_fusion import adapt_channels, cascade, load_adapter, load_cascade_weights
from src.nn.bundle import WeightBundle
from src.pipeline.runner import load_weights
from src.pipeline.synthetic import Scene
from src.roi.pointgfe import load_stage_weights, pointgfe_stack
from src.roi.pooling import DOWNSAMPLE_B, DOWNSAMPLE_W, downsample_volume, roi_aware_pool, roi_grid_pool
from src.utils.config import PipelineConfig
from src.utils.geometry import canonicalize, points_in_box
from src.utils.spatial_index import build_index
from src.voxelization.voxelgrid import voxelize

logger = logging.getLogger(__name__)

COMPONENTS = ["augment", "voxelize", "grid_pool", "pointgfe", "aware_pool", "downsample", "bgrf"]
# components whose time is summed over the three cascaded stages
STAGED = {"pointgfe": 3, "aware_pool": 3, "bgrf": 3}
MIN_REPEAT = 3
BENCH_COLUMNS = ["component", "median_seconds", "repeats", "accumulated_stages"]


def _timed(fn: Callable, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


def bench_once(config: PipelineConfig, bundle: WeightBundle, scene: Scene) -> Dict[str, float]:
    """Wall time per component for one pass over every box of the scene; bgrf is 0 with fusion disabled."""
    times: Dict[str, float] = defaultdict(float)
    points5, times["augment"] = _timed(augment_points, scene.points, scene.raster, scene.calib)
    if not config.depth_prior_enabled:
        points5 = disable_depth_prior(points5)
    voxel_map, times["voxelize"] = _timed(voxelize, points5, config.grid)

    index = build_index(voxel_map.centers, config.roi.grid_query_radius) if len(voxel_map) else None
    gfe_stages = load_stage_weights(bundle, config.gfe)
    bgrf_stages = load_cascade_weights(bundle) if config.fusion_enabled else []
    adapter = load_adapter(bundle) if config.fusion_enabled else None
    kernel, bias = bundle.get(DOWNSAMPLE_W), bundle.get(DOWNSAMPLE_B)
    pts = np.asarray(points5, dtype=np.float64)

    for box in scene.boxes:
        voxel_volume, t = _timed(roi_grid_pool, voxel_map, box, config.roi, index)
        times["grid_pool"] += t
        members = points_in_box(pts[:, :3], box, config.roi.margin)
        canonical = canonicalize(pts[members, :3], box)
        local_points = np.hstack([canonical, pts[members, 3:]])
        for _ in range(STAGED["pointgfe"]):
            embedding, t = _timed(pointgfe_stack, local_points, config.gfe, bundle, gfe_stages)
            times["pointgfe"] += t
        for _ in range(STAGED["aware_pool"]):
            fine, t = _timed(roi_aware_pool, canonical, embedding, box.dims, config.roi.m)
            times["aware_pool"] += t
        point_volume, t = _timed(downsample_volume, fine, kernel, bias)
        times["downsample"] += t

        if not config.fusion_enabled:
            continue
        if adapter is not None:
            voxel_volume = adapt_channels(voxel_volume, adapter)
        _, t = _timed(cascade, voxel_volume, point_volume, bgrf_stages, config.fusion.gate_mode)
        times["bgrf"] += t
    return {name: times[name] for name in COMPONENTS}


def run_bench(
    config: PipelineConfig,
    scene: Scene,
    repeat: int = 5,
    bundle: Optional[WeightBundle] = None,
) -> pd.DataFrame:
    """Median over `repeat` passes of each component's wall time."""
    if repeat < MIN_REPEAT:
        raise ValueError(f"bench needs repeat >= {MIN_REPEAT}, got {repeat}")
    bundle = bundle if bundle is not None else load_weights(config)
    runs: List[Dict[str, float]] = []
    for i in range(repeat):
        runs.append(bench_once(config, bundle, scene))
        logger.debug("bench pass %d/%d done", i + 1, repeat)
    return pd.DataFrame(
        [{"component": name,
          "median_seconds": float(np.median([run[name] for run in runs])),
          "repeats": repeat,
          "accumulated_stages": STAGED.get(name, 1)} for name in COMPONENTS],
        columns=BENCH_COLUMNS,
    )
