# tests/test_pointgfe.py
import unittest

import numpy as np

from src.nn.bundle import WeightBundle, seeded_init
from src.nn.functional import relu
from src.roi.pointgfe import (
    PointGFEConfig, encode_local_geometry, load_stage_weights, neighborhoods, pointgfe_manifest,
    pointgfe_stack, pointgfe_stage,
)
from src.utils.errors import BundleError, ShapeError


def random_points(rng, n, spread=1.0):
    return np.column_stack([rng.uniform(-spread, spread, (n, 3)), rng.random(n), rng.uniform(5, 30, n)])


class TestManifest(unittest.TestCase):
    def test_default_shapes(self):
        shapes = {spec.name: spec.shape for spec in pointgfe_manifest(PointGFEConfig())}
        self.assertEqual(shapes["gfe.stage1.W1"], (32, 8))
        self.assertEqual(shapes["gfe.stage2.W1"], (32, 35))
        self.assertEqual(shapes["gfe.stage3.W1"], (64, 35))
        self.assertEqual(shapes["gfe.stage3.W2"], (64, 64))
        self.assertEqual(len(shapes), 12)
        self.assertEqual(PointGFEConfig().out_channels, 128)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            PointGFEConfig(radius=0.0)
        with self.assertRaises(ValueError):
            PointGFEConfig(k=0)
        with self.assertRaises(ValueError):
            PointGFEConfig(stage_widths=(8, 8))


class TestLocalGeometry(unittest.TestCase):
    def test_offsets(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
        offs = encode_local_geometry(pos, np.array([[0, 1], [1, 1]]))
        np.testing.assert_array_equal(offs[0], [[0, 0, 0], [1, 2, 3]])
        np.testing.assert_array_equal(offs[1], np.zeros((2, 3)))

    def test_index_out_of_range(self):
        with self.assertRaises(IndexError):
            encode_local_geometry(np.zeros((3, 3)), np.array([[0], [1], [5]]))
        with self.assertRaises(IndexError):
            encode_local_geometry(np.zeros((3, 3)), np.array([[0], [-1], [2]]))

    def test_table_shape(self):
        with self.assertRaises(ShapeError):
            encode_local_geometry(np.zeros((3, 3)), np.zeros((2, 4), dtype=int))

    def test_every_point_finds_itself(self):
        rng = np.random.default_rng(0)
        pos = rng.uniform(-5, 5, (50, 3))
        table = neighborhoods(pos, PointGFEConfig(radius=0.3, k=4))
        self.assertGreaterEqual(int(table.min()), 0)


class TestStage(unittest.TestCase):
    def setUp(self):
        self.config = PointGFEConfig(radius=0.8, k=6, stage_widths=(8, 8, 16))
        self.bundle = seeded_init(5, pointgfe_manifest(self.config))
        self.weights = load_stage_weights(self.bundle, self.config)

    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        feats = random_points(rng, 12)
        offs = rng.normal(size=(12, 6, 3))
        w = self.weights[0]
        out = pointgfe_stage(feats, offs, w)
        for i in range(12):
            slot_outputs = []
            for j in range(6):
                joined = np.concatenate([feats[i], offs[i, j]])
                h = relu(w.W1.astype(np.float64) @ joined + w.b1)
                slot_outputs.append(relu(w.W2.astype(np.float64) @ h + w.b2))
            np.testing.assert_allclose(out[i], np.max(slot_outputs, axis=0), atol=1e-12)

    def test_neighbor_slot_order(self):
        rng = np.random.default_rng(3)
        feats = random_points(rng, 20)
        offs = rng.normal(size=(20, 6, 3))
        want = pointgfe_stage(feats, offs, self.weights[0])
        for _ in range(5):
            order = np.argsort(rng.random((20, 6)), axis=1)
            shuffled = np.take_along_axis(offs, order[:, :, None], axis=1)
            np.testing.assert_array_equal(pointgfe_stage(feats, shuffled, self.weights[0]), want)

    def test_width_mismatch(self):
        with self.assertRaises(ShapeError):
            pointgfe_stage(np.zeros((2, 4)), np.zeros((2, 6, 3)), self.weights[0])


class TestStack(unittest.TestCase):
    def setUp(self):
        self.config = PointGFEConfig()
        self.bundle = seeded_init(42, pointgfe_manifest(self.config))
        self.rng = np.random.default_rng(6)

    def test_output_shape(self):
        out = pointgfe_stack(random_points(self.rng, 40), self.config, self.bundle)
        self.assertEqual(out.shape, (40, 128))
        self.assertTrue((out >= 0).all())

    def test_empty_input(self):
        self.assertEqual(pointgfe_stack(np.zeros((0, 5)), self.config, self.bundle).shape, (0, 128))

    def test_permutation_equivariance(self):
        config = PointGFEConfig(k=64)
        bundle = seeded_init(42, pointgfe_manifest(config))
        pts = random_points(self.rng, 60)
        perm = self.rng.permutation(60)
        out = pointgfe_stack(pts, config, bundle)
        np.testing.assert_array_equal(pointgfe_stack(pts[perm], config, bundle), out[perm])

    def test_depth_prior_reaches_the_output(self):
        pts = random_points(self.rng, 30)
        shifted = pts.copy()
        shifted[:, 4] += 10.0
        out_a = pointgfe_stack(pts, self.config, self.bundle)
        out_b = pointgfe_stack(shifted, self.config, self.bundle)
        self.assertGreater(float(np.abs(out_a - out_b).max()), 0.0)

    def test_wrong_point_width(self):
        with self.assertRaises(ShapeError):
            pointgfe_stack(np.zeros((4, 4)), self.config, self.bundle)

    def test_missing_weights(self):
        with self.assertRaises(BundleError):
            pointgfe_stack(random_points(self.rng, 5), self.config, WeightBundle({}))


if __name__ == "__main__":
    unittest.main()
