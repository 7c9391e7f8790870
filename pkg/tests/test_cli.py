# tests/test_cli.py
import os
import tempfile
import unittest

import pandas as pd
import yaml
from click.testing import CliRunner

from src.main import cli
from src.pipeline.synthetic import make_scene, write_scene


class CliCase(unittest.TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = tmp.name
        self.runner = CliRunner()
        self.root = os.path.join(self.tmp, "kitti")
        self.scene = make_scene(seed=0, num_objects=2, points_per_object=100, background_points=500)
        self.paths = write_scene(self.scene, self.root, "000000")
        self.config_path = os.path.join(self.tmp, "config.yaml")
        with open(self.config_path, "w") as f:
            yaml.safe_dump({
                "data": {"root": self.root, "frames": ["000000"]},
                "pointgfe": {"stage_widths": [8, 8, 16]},
                "fusion": {"unify_channels": 8, "gate_hidden": 8},
                "pipeline": {"out_dir": os.path.join(self.tmp, "out")},
            }, f)

    def invoke(self, *args):
        return self.runner.invoke(cli, ["--config", self.config_path] + list(args))


class TestAugmentCommand(CliCase):
    def test_writes_five_field_records(self):
        out = os.path.join(self.tmp, "aug", "000000.bin5")
        result = self.invoke("augment", self.paths.cloud, self.paths.calib, self.paths.depth, out)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(os.path.getsize(out), 20 * len(self.scene.points))
        self.assertIn("✓", result.output)

    def test_missing_calibration(self):
        missing = os.path.join(self.tmp, "nope", "calib.txt")
        result = self.invoke("augment", self.paths.cloud, missing, self.paths.depth, os.path.join(self.tmp, "x.bin5"))
        self.assertEqual(result.exit_code, 2)
        self.assertIn(missing, result.output)


class TestPipelineCommand(CliCase):
    def test_runs_configured_frames(self):
        result = self.invoke("pipeline")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue(os.path.exists(os.path.join(self.tmp, "out", "manifest.json")))
        self.assertIn("2 boxes", result.output)

    def test_out_dir_override(self):
        other = os.path.join(self.tmp, "elsewhere")
        result = self.runner.invoke(cli, ["--config", self.config_path, "--out-dir", other, "--jobs", "2", "pipeline"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue(os.path.exists(os.path.join(other, "manifest.json")))

    def test_missing_config_file(self):
        result = self.runner.invoke(cli, ["--config", os.path.join(self.tmp, "absent.yaml"), "pipeline"])
        self.assertEqual(result.exit_code, 2)


class TestStatsAndBench(CliCase):
    def test_stats_csv(self):
        out = os.path.join(self.tmp, "stats.csv")
        result = self.invoke("stats", "--out", out)
        self.assertEqual(result.exit_code, 0, result.output)
        table = pd.read_csv(out)
        self.assertEqual(len(table), 80)
        self.assertEqual(list(table.columns), ["class", "bin_lo", "bin_hi", "count", "fraction"])

    def test_bench_csv(self):
        out = os.path.join(self.tmp, "bench.csv")
        result = self.invoke("bench", "--repeat", "3", "--objects", "1", "--points-per-object", "50",
                             "--background-points", "200", "--out", out)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(len(pd.read_csv(out)), 7)

    def test_bench_repeat_floor(self):
        self.assertEqual(self.invoke("bench", "--repeat", "2").exit_code, 2)


class TestWeightsAndSelfcheck(CliCase):
    def test_init_then_info(self):
        path = os.path.join(self.tmp, "weights", "model.wb")
        result = self.runner.invoke(cli, ["--config", self.config_path, "--seed", "3", "init-weights", path])
        self.assertEqual(result.exit_code, 0, result.output)
        info = self.invoke("weights-info", path)
        self.assertEqual(info.exit_code, 0, info.output)
        self.assertIn("gfe.stage1.W1", info.output)
        self.assertIn("bgrf.stage3.refine.0.W", info.output)

    def test_weights_info_on_garbage(self):
        path = os.path.join(self.tmp, "garbage.wb")
        with open(path, "wb") as f:
            f.write(b"\x00\x01\x02")
        self.assertEqual(self.invoke("weights-info", path).exit_code, 2)

    def test_selfcheck_passes(self):
        result = self.invoke("selfcheck")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("checks passed", result.output)

    def test_selfcheck_fault(self):
        result = self.invoke("selfcheck", "--inject-fault", "ball_query_padding")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("ball_query_padding", result.output)


if __name__ == "__main__":
    unittest.main()
