# tests/test_pooling.py
import math
import os
import tempfile
import unittest

import numpy as np

from src.nn.bundle import seeded_init
from src.parsers.volume_dump import read_volume, write_volume
from src.pipeline.synthetic import make_scene
from src.roi.pointgfe import PointGFEConfig, pointgfe_manifest
from src.roi.pooling import (
    FeatureVolume, RoiPoolConfig, VolumeTag, downsample_manifest, downsample_volume, extract_box_features,
    extract_roi_features, roi_aware_pool, roi_grid_points, roi_grid_pool, sub_voxel_indices,
)
from src.utils.errors import FormatError, ShapeError
from src.utils.geometry import Box3D, rotate_box, rotate_points
from src.utils.spatial_index import ball_query_bruteforce
from src.voxelization.voxelgrid import GridSpec, SparseVoxelMap, voxelize


def unit_spec(extent=20) -> GridSpec:
    return GridSpec(origin=[-10.0, -10.0, -10.0], voxel_size=[1.0, 1.0, 1.0], extent=[extent] * 3)


def voxel_map_from(coords, features, spec=None) -> SparseVoxelMap:
    spec = spec or unit_spec()
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    features = np.asarray(features, dtype=np.float64)[order]
    return SparseVoxelMap(spec=spec, coords=coords, features=features,
                          centers=spec.voxel_centers(coords), counts=np.ones(len(coords), dtype=np.int64))


def full_bundle(seed=3, gfe_cfg=None):
    gfe_cfg = gfe_cfg or PointGFEConfig()
    return seeded_init(seed, pointgfe_manifest(gfe_cfg) + downsample_manifest(gfe_cfg.out_channels))


class TestRoiGrid(unittest.TestCase):
    def test_grid_points_are_cell_centers(self):
        pts = roi_grid_points(Box3D(0, 0, 0, 6.0, 6.0, 6.0), 6)
        self.assertEqual(pts.shape, (216, 3))
        np.testing.assert_allclose(pts[0], [-2.5, -2.5, -2.5])
        np.testing.assert_allclose(pts[1], [-1.5, -2.5, -2.5])
        np.testing.assert_allclose(pts[6], [-2.5, -1.5, -2.5])
        np.testing.assert_allclose(pts[36], [-2.5, -2.5, -1.5])

    def test_grid_points_follow_yaw(self):
        pts = roi_grid_points(Box3D(1.0, 2.0, 0.0, 2.0, 2.0, 2.0, math.pi / 2), 2)
        # first cell is local (-0.5, -0.5, -0.5) -> world (1.5, 1.5, -0.5)
        np.testing.assert_allclose(pts[0], [1.5, 1.5, -0.5], atol=1e-12)

    def test_single_voxel_fills_a_small_box(self):
        vmap = voxel_map_from([[10, 10, 10]], [[1.0, 2.0, 3.0, 4.0, 5.0]])
        box = Box3D(0.5, 0.5, 0.5, 0.6, 0.6, 0.6)
        vol = roi_grid_pool(vmap, box, RoiPoolConfig())
        self.assertEqual(vol.data.shape, (5, 6, 6, 6))
        self.assertEqual(vol.tag, VolumeTag.VOXEL_PATH)
        for c, value in enumerate([1.0, 2.0, 3.0, 4.0, 5.0]):
            self.assertTrue((vol.data[c] == value).all())

    def test_empty_map(self):
        vol = roi_grid_pool(SparseVoxelMap.empty(unit_spec()), Box3D(0, 0, 0, 1, 1, 1), RoiPoolConfig())
        self.assertEqual(vol.data.shape, (5, 6, 6, 6))
        self.assertEqual(float(np.abs(vol.data).sum()), 0.0)

    def test_matches_bruteforce_mean(self):
        rng = np.random.default_rng(21)
        coords = {tuple(c) for c in rng.integers(7, 13, size=(120, 3)).tolist()}
        vmap = voxel_map_from(list(coords), rng.normal(size=(len(coords), 5)))
        box = Box3D(0.3, -0.2, 0.1, 3.5, 2.5, 2.0, 0.6)
        cfg = RoiPoolConfig(grid_query_radius=1.2, grid_query_k=8)
        vol = roi_grid_pool(vmap, box, cfg)
        grid = roi_grid_points(box, cfg.n)
        for cell, point in enumerate(grid):
            ix, iy, iz = cell % 6, (cell // 6) % 6, cell // 36
            picked = ball_query_bruteforce(vmap.centers, point, cfg.grid_query_radius, cfg.grid_query_k)
            want = np.zeros(5) if picked is None else vmap.features[np.unique(picked)].mean(axis=0)
            np.testing.assert_allclose(vol.data[:, ix, iy, iz], want, atol=1e-12)

    def test_far_voxels_do_not_matter(self):
        near = [[10, 10, 10], [10, 11, 10], [9, 10, 10]]
        feats = [[1.0] * 5, [2.0] * 5, [4.0] * 5]
        box = Box3D(0.5, 0.5, 0.5, 2.0, 2.0, 2.0)
        cfg = RoiPoolConfig()
        with_far = voxel_map_from(near + [[0, 0, 0], [19, 19, 19]], feats + [[100.0] * 5, [-7.0] * 5])
        np.testing.assert_array_equal(roi_grid_pool(voxel_map_from(near, feats), box, cfg).data,
                                      roi_grid_pool(with_far, box, cfg).data)


class TestRoiAwarePool(unittest.TestCase):
    def test_channelwise_max_and_empty_cells(self):
        dims = [2.0, 2.0, 2.0]
        pos = np.array([[-0.9, -0.9, -0.9], [-0.8, -0.95, -0.7], [0.9, 0.9, 0.9]])
        emb = np.array([[1.0, 5.0], [3.0, 2.0], [7.0, 0.5]])
        vol = roi_aware_pool(pos, emb, dims, 4)
        self.assertEqual(vol.data.shape, (2, 4, 4, 4))
        self.assertEqual(vol.data[:, 0, 0, 0].tolist(), [3.0, 5.0])
        self.assertEqual(vol.data[:, 3, 3, 3].tolist(), [7.0, 0.5])
        self.assertEqual(float(np.abs(vol.data).sum()), 3.0 + 5.0 + 7.0 + 0.5)

    def test_point_order_does_not_matter(self):
        rng = np.random.default_rng(4)
        pos = rng.uniform(-1, 1, (80, 3))
        emb = rng.random((80, 6))
        perm = rng.permutation(80)
        np.testing.assert_array_equal(roi_aware_pool(pos, emb, [2, 2, 2], 4).data,
                                      roi_aware_pool(pos[perm], emb[perm], [2, 2, 2], 4).data)

    def test_margin_points_clamp(self):
        idx = sub_voxel_indices([[-1.2, 0.0, 1.15], [1.0, -1.0, 0.0]], [2.0, 2.0, 2.0], 4)
        self.assertEqual(idx.tolist(), [[0, 2, 3], [3, 0, 2]])

    def test_no_points(self):
        vol = roi_aware_pool(np.zeros((0, 3)), np.zeros((0, 3)), [1, 1, 1], 2)
        self.assertEqual(float(np.abs(vol.data).sum()), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            roi_aware_pool(np.zeros((3, 3)), np.zeros((2, 4)), [1, 1, 1], 2)


class TestDownsample(unittest.TestCase):
    def test_averaging_kernel(self):
        channels = 3
        kernel = np.zeros((channels, channels, 2, 2, 2))
        for c in range(channels):
            kernel[c, c] = 1.0 / 8.0
        data = np.random.default_rng(2).random((channels, 4, 4, 4))
        out = downsample_volume(FeatureVolume(data, VolumeTag.POINT_PATH), kernel, np.zeros(channels))
        self.assertEqual(out.data.shape, (3, 2, 2, 2))
        want = data.reshape(3, 2, 2, 2, 2, 2, 2).mean(axis=(2, 4, 6))
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_zero_kernel_leaves_relu_bias(self):
        vol = FeatureVolume(np.ones((2, 4, 4, 4)), VolumeTag.POINT_PATH)
        out = downsample_volume(vol, np.zeros((2, 2, 2, 2, 2)), np.array([0.25, -1.0]))
        self.assertTrue((out.data[0] == 0.25).all())
        self.assertTrue((out.data[1] == 0.0).all())

    def test_odd_grid(self):
        with self.assertRaises(ShapeError):
            downsample_volume(FeatureVolume.zeros(2, 3, VolumeTag.POINT_PATH), np.zeros((2, 2, 2, 2, 2)), np.zeros(2))


class TestExtractRoiFeatures(unittest.TestCase):
    def setUp(self):
        scene = make_scene(seed=1, num_objects=2, points_per_object=150, background_points=300)
        rng = np.random.default_rng(1)
        self.points5 = np.column_stack([scene.points, rng.uniform(5, 40, len(scene.points))])
        self.boxes = scene.boxes
        self.voxel_map = voxelize(self.points5, GridSpec.kitti())
        self.cfg = RoiPoolConfig()
        self.gfe_cfg = PointGFEConfig()
        self.bundle = full_bundle()

    def test_volume_shapes(self):
        feats = extract_roi_features(self.points5, self.voxel_map, self.boxes, self.bundle, self.cfg, self.gfe_cfg)
        self.assertEqual(len(feats), 2)
        for roi in feats:
            self.assertEqual(roi.voxel_volume.data.shape, (5, 6, 6, 6))
            self.assertEqual(roi.point_volume.data.shape, (128, 6, 6, 6))
            self.assertGreaterEqual(roi.num_points, 150)

    def test_empty_box(self):
        far = Box3D(60.0, 35.0, 0.0, 1.0, 1.0, 1.0)
        roi = extract_box_features(self.points5, self.voxel_map, far, self.bundle, self.cfg, self.gfe_cfg)
        self.assertEqual(roi.num_points, 0)
        self.assertEqual(roi.point_volume.data.shape, (128, 6, 6, 6))
        self.assertEqual(float(np.abs(roi.point_volume.data).sum()), 0.0)

    def test_point_path_ignores_scene_yaw(self):
        box = self.boxes[0]
        empty = SparseVoxelMap.empty(GridSpec.kitti())
        gfe_cfg = PointGFEConfig(stage_widths=(8, 8, 16))
        yaws = np.random.default_rng(7).uniform(-math.pi, math.pi, 50)
        for seed in range(10):
            bundle = full_bundle(seed, gfe_cfg)
            base = extract_box_features(self.points5, empty, box, bundle, self.cfg, gfe_cfg)
            for theta in yaws:
                turned = self.points5.copy()
                turned[:, :3] = rotate_points(self.points5[:, :3], theta)
                roi = extract_box_features(turned, empty, rotate_box(box, theta), bundle, self.cfg, gfe_cfg)
                self.assertEqual(roi.num_points, base.num_points)
                np.testing.assert_allclose(roi.point_volume.data, base.point_volume.data, atol=1e-9)


class TestVolumes(unittest.TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.path = os.path.join(tmp.name, "v", "roi.fvol")

    def test_dump_round_trip(self):
        data = np.random.default_rng(0).random((3, 2, 2, 2)).astype(np.float32)
        write_volume(self.path, FeatureVolume(data, VolumeTag.FUSED))
        back = read_volume(self.path)
        self.assertEqual(back.tag, VolumeTag.FUSED)
        np.testing.assert_array_equal(back.data, data)

    def test_bad_header(self):
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, "wb") as f:
            f.write(b"FVOL1 nonsense 1 1\n\x00\x00\x00\x00")
        with self.assertRaises(FormatError):
            read_volume(self.path)

    def test_payload_size(self):
        write_volume(self.path, FeatureVolume.zeros(2, 2, VolumeTag.VOXEL_PATH))
        with open(self.path, "ab") as f:
            f.write(b"\x00")
        with self.assertRaises(FormatError):
            read_volume(self.path)

    def test_volume_validation(self):
        with self.assertRaises(ShapeError):
            FeatureVolume(np.zeros((2, 3, 3, 4)), VolumeTag.FUSED)
        with self.assertRaises(ValueError):
            FeatureVolume(np.full((1, 1, 1, 1), np.nan), VolumeTag.FUSED)

    def test_pool_config_validation(self):
        with self.assertRaises(ValueError):
            RoiPoolConfig(n=6, m=10)
        with self.assertRaises(ValueError):
            RoiPoolConfig(margin=-0.1)


if __name__ == "__main__":
    unittest.main()
