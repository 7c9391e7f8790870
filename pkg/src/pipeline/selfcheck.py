# src/pipeline/selfcheck.py
"""
Embedded oracle and invariant suite. Every check builds a small seeded case,
runs the library routine and compares it with a plain-loop reference or a
closed form. `inject_fault` perturbs one named check's result so the failure
path can be exercised.
"""

import logging
import math
import os
import tempfile
import time
import zlib
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from src.augmentation.depth_prior import augment_points, sample_depth
from src.fusion.gated_fusion import (
    FusionConfig, bgrf_manifest, cascade, gated_fuse_stage, load_cascade_weights, stage_gates,
    stage_weight_gradients,
)
from src.nn.bundle import read_bundle, seeded_init, write_bundle, zero_bundle
from src.nn.functional import conv3d_forward
from src.nn.gradcheck import finite_diff_check
from src.parsers.depth_raster import DepthRaster
from src.parsers.kitti_parser import CalibrationSet
from src.roi.pointgfe import PointGFEConfig, pointgfe_manifest, pointgfe_stack
from src.roi.pooling import (
    DOWNSAMPLE_B, DOWNSAMPLE_W, FeatureVolume, RoiPoolConfig, VolumeTag, downsample_manifest, downsample_volume,
    roi_aware_pool, roi_grid_points, roi_grid_pool,
)
from src.utils.geometry import Box3D, box_local_to_world, canonicalize, points_in_box, rotate_box, rotate_points
from src.utils.spatial_index import ball_query, ball_query_bruteforce, build_index, squared_distance
from src.voxelization.voxelgrid import GridSpec, voxelize

logger = logging.getLogger(__name__)

CheckFn = Callable[[np.random.Generator, bool], Tuple[bool, str]]


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


def _corrupt(value, fault: bool):
    return value + 1 if fault else value


# ─── Spatial index ─────────────────────────────────────────────────────────────

def check_ball_query_oracle(rng, fault):
    mismatches = 0
    queries = 0
    for _ in range(10):
        pos = rng.uniform(-3.0, 3.0, size=(int(rng.integers(1, 400)), 3))
        index = build_index(pos, 0.8)
        for center in rng.uniform(-3.5, 3.5, size=(20, 3)):
            got = ball_query(index, center, 0.8, 9)
            want = ball_query_bruteforce(pos, center, 0.8, 9)
            same = (got is None and want is None) or (
                got is not None and want is not None and np.array_equal(got, want))
            mismatches += not same
            queries += 1
    mismatches = _corrupt(mismatches, fault)
    return mismatches == 0, f"{mismatches}/{queries} queries differ from the linear scan"


def check_ball_query_padding(rng, fault):
    pos = np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0], [0.1, 0.0, 0.0]])
    got = _corrupt(ball_query(build_index(pos, 0.5), [0.0, 0.0, 0.0], 0.5, 4), fault)
    return np.array_equal(got, [0, 2, 0, 0]), f"got {np.asarray(got).tolist()}, want [0, 2, 0, 0]"


# ─── Depth prior ───────────────────────────────────────────────────────────────

def check_bilinear_affine(rng, fault):
    # eighths keep every raster value exact in float32
    a, b, c = rng.integers(1, 8, 3) / 8.0
    u_grid, v_grid = np.meshgrid(np.arange(64.0), np.arange(48.0))
    raster = DepthRaster(a * u_grid + b * v_grid + c * 10)
    worst = 0.0
    for u, v in zip(rng.uniform(0, 63, 200), rng.uniform(0, 47, 200)):
        expected = a * u + b * v + c * 10
        got = _corrupt(sample_depth(raster, u, v), fault)
        worst = max(worst, abs(got - expected))
    return worst <= 1e-6, f"max |error| {worst:.3g}"


def check_augment_preserves_points(rng, fault):
    pts = rng.normal(0.0, 20.0, size=(500, 4)).astype(np.float32)
    eye34 = np.hstack([np.eye(3), np.zeros((3, 1))])
    calib = CalibrationSet(P=[[100, 0, 32, 0], [0, 100, 24, 0], [0, 0, 1, 0]], R0=np.eye(3), Tr=eye34)
    out = augment_points(pts, DepthRaster(np.ones((48, 64))), calib)
    out = _corrupt(out, fault)
    same = out.shape == (500, 5) and np.array_equal(out[:, :4].view(np.uint32), pts.view(np.uint32))
    return same, f"shape {out.shape}, first four columns {'bit-identical' if same else 'changed'}"


# ─── Voxelization ──────────────────────────────────────────────────────────────

def check_voxel_order_invariance(rng, fault):
    spec = GridSpec.from_range((0, 0, 0, 4, 4, 4), (0.5, 0.5, 0.5))
    pts = np.hstack([rng.uniform(0, 4, (600, 3)), rng.random((600, 2))]).astype(np.float32)
    a = voxelize(pts, spec)
    b = voxelize(pts[rng.permutation(600)], spec)
    got = _corrupt(b.features, fault)
    same = np.array_equal(a.coords, b.coords) and np.array_equal(a.features, got)
    return same, "voxel means identical under permutation" if same else "voxel means changed"


# ─── RoI pooling ───────────────────────────────────────────────────────────────

def check_aware_pool_oracle(rng, fault):
    m, dims = 4, np.array([2.0, 1.0, 1.5])
    pos = rng.uniform(-0.6, 0.6, (150, 3)) * dims * 1.2
    emb = rng.normal(size=(150, 6))
    got = _corrupt(roi_aware_pool(pos, emb, dims, m).data, fault)
    want = np.zeros((6, m, m, m))
    seen = set()
    for p, e in zip(pos, emb):
        cell = tuple(min(max(int(math.floor((p[a] + dims[a] / 2) / (dims[a] / m))), 0), m - 1) for a in range(3))
        for ch in range(6):
            if cell not in seen:
                want[(ch,) + cell] = e[ch]
            else:
                want[(ch,) + cell] = max(want[(ch,) + cell], e[ch])
        seen.add(cell)
    return np.array_equal(got, want), f"max |diff| {np.max(np.abs(got - want)):.3g}"


def check_grid_pool_oracle(rng, fault):
    spec = GridSpec.from_range((-4, -4, -2, 4, 4, 2), (0.4, 0.4, 0.4))
    pts = np.hstack([rng.uniform(-3, 3, (800, 3)) * [1, 1, 0.5], rng.random((800, 2))])
    vmap = voxelize(pts, spec)
    cfg = RoiPoolConfig(n=3, m=6, grid_query_radius=0.8, grid_query_k=5)
    box = Box3D(0.3, -0.2, 0.1, 3.0, 2.0, 1.5, rng.uniform(-math.pi, math.pi))
    got = _corrupt(roi_grid_pool(vmap, box, cfg).data, fault)
    want = np.zeros_like(got)
    rows = []
    for g in roi_grid_points(box, cfg.n):
        members = [i for i in range(len(vmap))
                   if squared_distance(vmap.centers[i], g) <= cfg.grid_query_radius ** 2][:cfg.grid_query_k]
        rows.append(np.mean(vmap.features[members], axis=0) if members else np.zeros(vmap.channels))
    n = cfg.n
    for flat, row in enumerate(rows):
        ix, iy, iz = flat % n, (flat // n) % n, flat // (n * n)
        want[:, ix, iy, iz] = row
    err = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-6))
    return err <= 1e-6, f"max relative error {err:.3g}"


def check_downsample_loop(rng, fault):
    kernel = rng.normal(size=(3, 2, 2, 2, 2))
    bias = rng.normal(size=3)
    vol = rng.normal(size=(2, 4, 4, 4))
    got = _corrupt(conv3d_forward(kernel, bias, vol, stride=2), fault)
    want = np.zeros((3, 2, 2, 2))
    for o in range(3):
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    acc = bias[o]
                    for c in range(2):
                        for a in range(2):
                            for b in range(2):
                                for d in range(2):
                                    acc += kernel[o, c, a, b, d] * vol[c, 2 * x + a, 2 * y + b, 2 * z + d]
                    want[o, x, y, z] = acc
    err = float(np.max(np.abs(got - want)))
    return err <= 1e-9, f"max |diff| {err:.3g}"


def check_point_path_yaw_invariance(rng, fault):
    gfe = PointGFEConfig(stage_widths=(4, 4, 8))
    bundle = seeded_init(int(rng.integers(1 << 31)),
                         pointgfe_manifest(gfe) + downsample_manifest(gfe.out_channels))
    kernel, bias = bundle.get(DOWNSAMPLE_W), bundle.get(DOWNSAMPLE_B)
    box = Box3D(5.0, 2.0, 0.0, 3.0, 1.6, 1.5, rng.uniform(-math.pi, math.pi))
    local = (rng.random((60, 3)) - 0.5) * box.dims
    pts = np.hstack([box_local_to_world(local, box), rng.random((60, 2))])

    def point_path(points, b):
        members = points_in_box(points[:, :3], b, 0.2)
        canon = canonicalize(points[members, :3], b)
        emb = pointgfe_stack(np.hstack([canon, points[members, 3:]]), gfe, bundle)
        return downsample_volume(roi_aware_pool(canon, emb, b.dims, 4), kernel, bias).data

    reference = point_path(pts, box)
    worst = 0.0
    for theta in rng.uniform(-math.pi, math.pi, 5):
        turned = np.hstack([rotate_points(pts[:, :3], theta), pts[:, 3:]])
        got = _corrupt(point_path(turned, rotate_box(box, theta)), fault)
        worst = max(worst, float(np.max(np.abs(got - reference))))
    return worst <= 1e-5, f"max |diff| under rotation {worst:.3g}"


# ─── Gated fusion ──────────────────────────────────────────────────────────────

def check_bgrf_zero_closed_form(rng, fault):
    cfg = FusionConfig(channels=3, unify_channels=4, gate_hidden=4)
    stages = load_cascade_weights(zero_bundle(bgrf_manifest(cfg)))
    v = FeatureVolume(rng.normal(size=(3, 4, 4, 4)), VolumeTag.VOXEL_PATH)
    p = FeatureVolume(rng.normal(size=(3, 4, 4, 4)), VolumeTag.POINT_PATH)
    out = cascade(v, p, stages)
    s1 = 0.5 * (v.data + p.data)
    s2 = 0.5 * (s1 + p.data)
    s3 = 0.5 * (s2 + p.data)
    average = (s1 + s2 + s3) / 3.0
    got = _corrupt(out.average.data, fault)
    err = max(float(np.max(np.abs(o.data - w))) for o, w in zip(out.stages, (s1, s2, s3)))
    err = max(err, float(np.max(np.abs(got - average))))
    return err <= 1e-6, f"max |diff| from the closed form {err:.3g}"


def check_bgrf_gradient(rng, fault):
    cfg = FusionConfig(channels=3, unify_channels=4, gate_hidden=4)
    worst = 0.0
    for _ in range(5):
        weights = load_cascade_weights(seeded_init(int(rng.integers(1 << 31)), bgrf_manifest(cfg)))[0]
        v = FeatureVolume(rng.normal(size=(3, 3, 3, 3)), VolumeTag.VOXEL_PATH)
        p = FeatureVolume(rng.normal(size=(3, 3, 3, 3)), VolumeTag.POINT_PATH)

        def loss(vec):
            return float(gated_fuse_stage(v, p, weights.from_vector(vec)).data.sum())

        def analytic(vec):
            w = weights.from_vector(vec)
            grads = stage_weight_gradients(v.data, p.data, w)
            return _corrupt(np.concatenate([np.ravel(grads[name]) for name in w.named()]), fault)

        worst = max(worst, finite_diff_check(loss, analytic, weights.to_vector(), eps=1e-4))
    return worst <= 1e-4, f"max relative gradient error {worst:.3g} over 5 draws"


def check_bgrf_gate_range(rng, fault):
    cfg = FusionConfig(channels=3, unify_channels=4, gate_hidden=4)
    stage = load_cascade_weights(seeded_init(int(rng.integers(1 << 31)), bgrf_manifest(cfg)))[0]
    a_v, a_p = stage_gates(rng.normal(size=(3, 4, 4, 4)), rng.normal(size=(3, 4, 4, 4)), stage)
    gates = _corrupt(np.concatenate([a_v, a_p]), fault)
    inside = bool(np.all((gates > 0) & (gates < 1)))
    return inside, f"gates in [{gates.min():.3g}, {gates.max():.3g}]"


# ─── Weight bundles ────────────────────────────────────────────────────────────

def check_bundle_round_trip(rng, fault):
    bundle = seeded_init(int(rng.integers(1 << 31)), pointgfe_manifest(PointGFEConfig()))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "weights.wb")
        write_bundle(path, bundle)
        back = read_bundle(path)
    same = back.equals(bundle) and not fault
    return same, "bundle survives write/read" if same else "bundle changed on write/read"


CHECKS: Dict[str, CheckFn] = {
    "ball_query_vs_bruteforce": check_ball_query_oracle,
    "ball_query_padding": check_ball_query_padding,
    "bilinear_affine_exact": check_bilinear_affine,
    "augment_preserves_points": check_augment_preserves_points,
    "voxel_mean_order_invariance": check_voxel_order_invariance,
    "aware_pool_vs_oracle": check_aware_pool_oracle,
    "grid_pool_vs_oracle": check_grid_pool_oracle,
    "downsample_vs_loop": check_downsample_loop,
    "point_path_yaw_invariance": check_point_path_yaw_invariance,
    "bgrf_zero_weight_closed_form": check_bgrf_zero_closed_form,
    "bgrf_gate_range": check_bgrf_gate_range,
    "bgrf_gradient_check": check_bgrf_gradient,
    "bundle_round_trip": check_bundle_round_trip,
}


def run_selfcheck(seed: int = 0, inject_fault: Optional[str] = None,
                  names: Optional[List[str]] = None) -> List[CheckResult]:
    if inject_fault is not None and inject_fault not in CHECKS:
        raise ValueError(f"unknown check '{inject_fault}'; choose from {sorted(CHECKS)}")
    selected = names or list(CHECKS)
    results = []
    for name in selected:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
        start = time.perf_counter()
        try:
            passed, detail = CHECKS[name](rng, name == inject_fault)
        except Exception as e:  # a crashing check is a failed check
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
        logger.debug("check %s: %s (%s)", name, "pass" if passed else "FAIL", detail)
    return results
