# tests/test_spatial_index.py
import unittest

import numpy as np

from src.utils.spatial_index import (
    EMPTY, ball_query, ball_query_bruteforce, ball_query_many, build_index, neighbor_counts, squared_distance,
)


class TestBallQuery(unittest.TestCase):
    def setUp(self):
        self.positions = np.array([
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.2, 0.0],
            [5.0, 5.0, 5.0],
        ])
        self.index = build_index(self.positions, cell_size=0.5)

    def test_first_k_by_index_with_padding(self):
        self.assertEqual(ball_query(self.index, [0.0, 0.0, 0.0], 0.5, 5).tolist(), [0, 1, 2, 0, 0])

    def test_truncates_to_k(self):
        self.assertEqual(ball_query(self.index, [0.0, 0.0, 0.0], 0.5, 2).tolist(), [0, 1])

    def test_nothing_in_range(self):
        self.assertIsNone(ball_query(self.index, [2.0, 2.0, 2.0], 0.5, 4))
        rows = ball_query_many(self.index, [[2.0, 2.0, 2.0], [5.0, 5.0, 5.1]], 0.5, 3)
        self.assertEqual(rows.tolist(), [[EMPTY] * 3, [3, 3, 3]])

    def test_radius_boundary_is_inclusive(self):
        index = build_index([[1.0, 0.0, 0.0]], cell_size=0.25)
        self.assertEqual(ball_query(index, [0.0, 0.0, 0.0], 1.0, 1).tolist(), [0])

    def test_empty_index_and_empty_centers(self):
        empty = build_index(np.zeros((0, 3)), cell_size=1.0)
        self.assertIsNone(ball_query(empty, [0.0, 0.0, 0.0], 1.0, 2))
        self.assertEqual(ball_query_many(self.index, np.zeros((0, 3)), 1.0, 2).shape, (0, 2))

    def test_argument_checks(self):
        with self.assertRaises(ValueError):
            build_index(self.positions, cell_size=0.0)
        with self.assertRaises(ValueError):
            ball_query(self.index, [0, 0, 0], 0.0, 2)
        with self.assertRaises(ValueError):
            ball_query(self.index, [0, 0, 0], 1.0, 0)
        with self.assertRaises(ValueError):
            ball_query_bruteforce(self.positions, [0, 0, 0], -1.0, 2)

    def test_matches_linear_scan_on_random_scenes(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            n = int(rng.integers(0, 120))
            positions = rng.uniform(-3.0, 3.0, size=(n, 3))
            radius = float(rng.uniform(0.2, 1.5))
            k = int(rng.integers(1, 20))
            cell = float(rng.uniform(0.3, 2.0)) * radius
            centers = rng.uniform(-3.5, 3.5, size=(15, 3))
            if n:
                # put some centers exactly on points
                centers[:3] = positions[rng.integers(0, n, size=3)]
            rows = ball_query_many(build_index(positions, cell), centers, radius, k)
            for center, row in zip(centers, rows):
                want = ball_query_bruteforce(positions, center, radius, k)
                if want is None:
                    self.assertTrue((row == EMPTY).all())
                else:
                    np.testing.assert_array_equal(row, want)


class TestNeighborCounts(unittest.TestCase):
    def test_counts_distinct_members(self):
        rows = np.array([[0, 1, 2, 0, 0], [4, 4, 4, 4, 4], [EMPTY] * 5, [1, 3, 7, 9, 12]])
        self.assertEqual(neighbor_counts(rows).tolist(), [3, 1, 0, 5])

    def test_single_column(self):
        self.assertEqual(neighbor_counts(np.array([[3], [EMPTY]])).tolist(), [1, 0])

    def test_agrees_with_query(self):
        rng = np.random.default_rng(7)
        positions = rng.uniform(0, 2, size=(80, 3))
        rows = ball_query_many(build_index(positions, 0.4), positions[:10], 0.4, 16)
        for center, count in zip(positions[:10], neighbor_counts(rows)):
            inside = int((squared_distance(positions, center) <= 0.4 * 0.4).sum())
            self.assertEqual(count, min(inside, 16))


if __name__ == "__main__":
    unittest.main()
