# src/main.py

import functools
import logging
import os
import sys

import click
import numpy as np

from src.augmentation.depth_prior import augment_points, project_to_raster
from src.nn.bundle import read_bundle, seeded_init, write_bundle
from src.parsers.depth_raster import read_depth_raster
from src.parsers.kitti_parser import read_calibration, read_point_cloud, write_point_cloud
from src.pipeline.bench import run_bench
from src.pipeline.runner import MANIFEST_NAME, model_manifest, run_pipeline
from src.pipeline.selfcheck import CHECKS, run_selfcheck
from src.pipeline.stats import load_stats_frames, reflectance_histogram, write_stats
from src.pipeline.synthetic import make_scene
from src.utils.config import DEFAULT_CONFIG_PATH, PipelineConfig, load_config
from src.utils.errors import PipelineError

logger = logging.getLogger(__name__)

EXIT_FAILED = 1
EXIT_USAGE = 2


def _fail(message: str, code: int = EXIT_USAGE):
    click.secho(f"✗ {message}", fg="red", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Map format, config and I/O errors to exit code 2 with the message (it names the path)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PipelineError, OSError) as e:
            _fail(str(e))
    return wrapper


def _config(ctx: click.Context) -> PipelineConfig:
    opts = ctx.obj
    path = opts["config_path"]
    if os.path.exists(path):
        config = load_config(path)
    elif path == DEFAULT_CONFIG_PATH:
        logger.info("no %s found; using built-in defaults", path)
        config = PipelineConfig()
    else:
        raise FileNotFoundError(f"config file not found: {path}")
    return config.with_overrides(seed=opts["seed"], jobs=opts["jobs"], out_dir=opts["out_dir"])


# ── CLI group ──────────────────────────────────────────────────────────────────

@click.group()
@click.option("--config", "config_path", default=DEFAULT_CONFIG_PATH, show_default=True,
              help="YAML configuration file")
@click.option("--seed", type=int, default=None, help="Override pipeline.seed")
@click.option("--jobs", type=click.IntRange(min=1), default=None, help="Override pipeline.jobs")
@click.option("--out-dir", default=None, help="Override pipeline.out_dir")
@click.option("--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, config_path, seed, jobs, out_dir, verbose):
    """Depth-prior RoI feature extraction"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config_path": config_path, "seed": seed, "jobs": jobs, "out_dir": out_dir}


@cli.command()
@click.argument("cloud")
@click.argument("calib")
@click.argument("depth")
@click.argument("out")
@handle_errors
def augment(cloud, calib, depth, out):
    """
    Append the depth prior to a KITTI .bin cloud and write 5-field records (.bin5).
    """
    points = read_point_cloud(cloud)
    calibration = read_calibration(calib)
    raster = read_depth_raster(depth)
    points5 = augment_points(points, raster, calibration)
    write_point_cloud(out, points5)
    _, valid = project_to_raster(points[:, :3], raster, calibration)
    ratio = float(valid.mean()) if valid.size else 0.0
    click.echo(f"{points5.shape[0]} points, {ratio:.1%} inside the depth raster")
    click.secho(f"✓ Wrote {points5.shape[0]} augmented points → {out}", fg="green")


@cli.command()
@click.option("--frame", "frames", multiple=True, help="Frame id(s); defaults to data.frames")
@click.pass_context
@handle_errors
def pipeline(ctx, frames):
    """
    Extract dual-path RoI features, fuse them through the gated cascade and dump
    every volume plus a manifest.
    """
    config = _config(ctx)
    click.echo(f"Running pipeline (seed={config.seed}, jobs={config.jobs}) …")
    report = run_pipeline(config, frames=list(frames) or None, progress=True)
    manifest_path = os.path.join(config.out_dir, MANIFEST_NAME)
    if report.failures:
        click.secho(f"✗ {report.failures} of {report.num_boxes} boxes failed; see {manifest_path}",
                    fg="red", err=True)
        sys.exit(EXIT_FAILED)
    click.secho(f"✓ {report.num_boxes} boxes → {manifest_path}", fg="green")


@cli.command()
@click.option("--labels", "label_dir", default=None, help="Label directory (default: data.label_dir)")
@click.option("--clouds", "cloud_dir", default=None, help="Velodyne directory (default: data.velodyne_dir)")
@click.option("--calib", "calib_dir", default=None, help="Calibration directory (default: data.calib_dir)")
@click.option("--out", default=None, help="CSV path (default: <out_dir>/reflectance_stats.csv)")
@click.pass_context
@handle_errors
def stats(ctx, label_dir, cloud_dir, calib_dir, out):
    """
    Per-class reflectance histogram of points inside ground-truth boxes (CSV).
    """
    config = _config(ctx)
    data = config.data
    label_dir = label_dir or os.path.join(data.root, data.label_dir)
    cloud_dir = cloud_dir or os.path.join(data.root, data.velodyne_dir)
    calib_dir = calib_dir or os.path.join(data.root, data.calib_dir)
    out = out or os.path.join(config.out_dir, "reflectance_stats.csv")

    table = reflectance_histogram(load_stats_frames(label_dir, cloud_dir, calib_dir))
    write_stats(table, out)
    for cls, rows in table.groupby("class", sort=False):
        total = int(rows["count"].sum())
        low = float(rows["fraction"].iloc[:2].sum())
        click.echo(f"{cls:<11} {total:>8} points, {low:.1%} with r < 0.1")
    click.secho(f"✓ Wrote {len(table)} rows → {out}", fg="green")


@cli.command()
@click.option("--repeat", type=click.IntRange(min=3), default=5, show_default=True)
@click.option("--objects", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--points-per-object", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--background-points", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--out", default=None, help="CSV path (default: <out_dir>/bench.csv)")
@click.pass_context
@handle_errors
def bench(ctx, repeat, objects, points_per_object, background_points, out):
    """
    Median wall time per component on a synthetic frame (CSV).
    """
    config = _config(ctx)
    scene = make_scene(config.seed, objects, points_per_object, background_points)
    table = run_bench(config, scene, repeat)
    out = out or os.path.join(config.out_dir, "bench.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    table.to_csv(out, index=False)
    for row in table.itertuples():
        click.echo(f"{row.component:<11} {row.median_seconds * 1e3:10.3f} ms  (x{row.accumulated_stages})")
    click.secho(f"✓ Wrote {len(table)} components → {out}", fg="green")


@cli.command()
@click.option("--inject-fault", default=None, hidden=True, type=click.Choice(sorted(CHECKS)),
              help="Test hook: corrupt the named check")
@click.pass_context
def selfcheck(ctx, inject_fault):
    """
    Run the embedded oracle and invariant checks; exit 1 if any fails.
    """
    seed = ctx.obj["seed"] or 0
    results = run_selfcheck(seed=seed, inject_fault=inject_fault)
    for r in results:
        mark, color = ("✓", "green") if r.passed else ("✗", "red")
        click.secho(f"{mark} {r.name:<30} {r.detail}", fg=color)
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.secho(f"✗ {len(failed)} of {len(results)} checks failed: {', '.join(failed)}", fg="red", err=True)
        sys.exit(EXIT_FAILED)
    click.secho(f"✓ All {len(results)} checks passed", fg="green")


@cli.command("init-weights")
@click.argument("out")
@click.pass_context
@handle_errors
def init_weights(ctx, out):
    """
    Write seeded weights for every tensor the pipeline reads.
    """
    config = _config(ctx)
    bundle = seeded_init(config.seed, model_manifest(config))
    write_bundle(out, bundle)
    click.secho(f"✓ {len(bundle)} tensors (seed={config.seed}) → {out}", fg="green")


@cli.command("weights-info")
@click.argument("path")
@handle_errors
def weights_info(path):
    """
    List the tensors of a weight bundle.
    """
    bundle = read_bundle(path)
    total = 0
    for name, shape in bundle.manifest():
        count = int(np.prod(shape)) if shape else 1
        total += count
        click.echo(f"{name:<32} {'x'.join(str(d) for d in shape) or 'scalar':<16} {count:>10}")
    click.secho(f"✓ {len(bundle)} tensors, {total} values (format v{bundle.version})", fg="green")


if __name__ == "__main__":
    cli()
