# tests/test_geometry.py
import math
import unittest

import numpy as np

from src.pipeline.synthetic import kitti_like_calibration
from src.utils.errors import BehindCameraError
from src.utils.geometry import (
    Box3D, box_local_to_world, canonicalize, image_to_rect, lidar_to_rect, normalize_yaw,
    points_in_box, rect_to_image, rect_to_lidar, rotate_box, rotate_points, rotation_z,
)


class TestYawAndRotation(unittest.TestCase):
    def test_normalize_yaw_range(self):
        self.assertAlmostEqual(normalize_yaw(math.pi + 0.5), -math.pi + 0.5)
        self.assertAlmostEqual(normalize_yaw(-math.pi), math.pi)
        self.assertAlmostEqual(normalize_yaw(0.25), 0.25)
        self.assertAlmostEqual(normalize_yaw(2 * math.pi + 0.1), 0.1)

    def test_rotation_z_quarter_turn(self):
        np.testing.assert_allclose(rotation_z(math.pi / 2) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)

    def test_rotate_box_moves_center_and_yaw(self):
        box = rotate_box(Box3D(2.0, 0.0, 1.0, 4.0, 2.0, 1.5, 0.0), math.pi / 2)
        np.testing.assert_allclose(box.center, [0.0, 2.0, 1.0], atol=1e-12)
        self.assertAlmostEqual(box.yaw, math.pi / 2)


class TestBox3D(unittest.TestCase):
    def test_rejects_nonpositive_dims(self):
        with self.assertRaises(ValueError):
            Box3D(0, 0, 0, 1.0, 0.0, 1.0)

    def test_rejects_non_finite(self):
        with self.assertRaises(ValueError):
            Box3D(float("nan"), 0, 0, 1.0, 1.0, 1.0)

    def test_yaw_is_normalized(self):
        self.assertAlmostEqual(Box3D(0, 0, 0, 1, 1, 1, 2 * math.pi + 0.3).yaw, 0.3)

    def test_array_round_trip(self):
        box = Box3D(1, 2, 3, 4, 5, 6, 0.5)
        self.assertEqual(Box3D.from_array(box.to_array()), box)


class TestCanonicalFrame(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.box = Box3D(4.0, -2.0, 0.5, 3.0, 1.5, 1.2, 0.7)

    def test_center_maps_to_origin(self):
        np.testing.assert_allclose(canonicalize(self.box.center, self.box), [[0.0, 0.0, 0.0]], atol=1e-12)

    def test_local_world_round_trip(self):
        pts = self.rng.normal(size=(50, 3))
        back = box_local_to_world(canonicalize(pts, self.box), self.box)
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_canonical_coordinates_ignore_scene_rotation(self):
        pts = self.rng.normal(size=(20, 3)) + self.box.center
        theta = 1.234
        turned = canonicalize(rotate_points(pts, theta), rotate_box(self.box, theta))
        np.testing.assert_allclose(turned, canonicalize(pts, self.box), atol=1e-12)


class TestPointsInBox(unittest.TestCase):
    def setUp(self):
        self.unit = Box3D(0, 0, 0, 1.0, 1.0, 1.0)

    def test_closed_boundary(self):
        pts = np.array([[0.5, 0.0, 0.0], [0.6, 0.0, 0.0]])
        self.assertEqual(points_in_box(pts, self.unit, margin=0.0).tolist(), [0])

    def test_margin_enlarges(self):
        pts = np.array([[0.6, 0.0, 0.0], [0.75, 0.0, 0.0]])
        self.assertEqual(points_in_box(pts, self.unit, margin=0.2).tolist(), [0])

    def test_rotated_box(self):
        box = Box3D(0, 0, 0, 4.0, 1.0, 1.0, math.pi / 2)
        pts = np.array([[0.0, 1.9, 0.0], [1.9, 0.0, 0.0]])
        self.assertEqual(points_in_box(pts, box, margin=0.0).tolist(), [0])

    def test_negative_margin(self):
        with self.assertRaises(ValueError):
            points_in_box(np.zeros((1, 3)), self.unit, margin=-0.1)


class TestCalibrationChain(unittest.TestCase):
    def setUp(self):
        self.calib = kitti_like_calibration()

    def test_lidar_rect_round_trip(self):
        pts = np.random.default_rng(0).uniform(-20, 20, size=(30, 3))
        np.testing.assert_allclose(rect_to_lidar(lidar_to_rect(pts, self.calib), self.calib), pts, atol=1e-9)

    def test_forward_axis_becomes_camera_depth(self):
        rect = lidar_to_rect(np.array([10.0, 0.0, 0.0]), self.calib)
        self.assertAlmostEqual(rect[2], 10.0 - 0.27)

    def test_image_round_trip(self):
        p = np.array([1.5, -0.4, 12.0])
        pix = rect_to_image(p, self.calib.P)
        np.testing.assert_allclose(image_to_rect(pix.u, pix.v, pix.depth_cam, self.calib.P), p, atol=1e-9)

    def test_behind_camera(self):
        with self.assertRaises(BehindCameraError):
            rect_to_image([0.0, 0.0, -5.0], self.calib.P)


if __name__ == "__main__":
    unittest.main()
