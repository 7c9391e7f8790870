# src/pipeline/stats.py

import logging
import os
from collections import defaultdict
from typing import Dict, Iterable, List, NamedTuple, Tuple

import numpy as np
import pandas as pd

from src.parsers.kitti_parser import LabeledBox, ObjectClass, read_calibration, read_labels, read_point_cloud
from src.utils.geometry import points_in_box

logger = logging.getLogger(__name__)

NUM_BINS = 20
STATS_COLUMNS = ["class", "bin_lo", "bin_hi", "count", "fraction"]


class StatsFrame(NamedTuple):
    frame_id: str
    points: np.ndarray
    labels: List[LabeledBox]


def pair_frames(label_dir: str, cloud_dir: str, calib_dir: str) -> List[Tuple[str, str, str, str]]:
    """(frame_id, label, cloud, calib) for ids present in all three dirs; the rest are skipped."""
    def stems(directory, ext):
        if not os.path.isdir(directory):
            logger.warning("directory %s does not exist", directory)
            return {}
        return {os.path.splitext(n)[0]: os.path.join(directory, n)
                for n in os.listdir(directory) if n.endswith(ext)}

    labels, clouds, calibs = stems(label_dir, ".txt"), stems(cloud_dir, ".bin"), stems(calib_dir, ".txt")
    paired = []
    for frame_id in sorted(set(labels) | set(clouds)):
        if frame_id in labels and frame_id in clouds and frame_id in calibs:
            paired.append((frame_id, labels[frame_id], clouds[frame_id], calibs[frame_id]))
        else:
            logger.warning("frame %s has no matching label/cloud/calib set; skipped", frame_id)
    return paired


def load_stats_frames(label_dir: str, cloud_dir: str, calib_dir: str) -> Iterable[StatsFrame]:
    for frame_id, label_path, cloud_path, calib_path in pair_frames(label_dir, cloud_dir, calib_dir):
        calib = read_calibration(calib_path)
        yield StatsFrame(frame_id, read_point_cloud(cloud_path), read_labels(label_path, calib))


def reflectance_histogram(frames: Iterable[StatsFrame], num_bins: int = NUM_BINS) -> pd.DataFrame:
    """
    Per class, reflectance histogram of the points inside ground-truth boxes
    over num_bins uniform bins on [0, 1]. Every class gets all its rows, even
    when no point falls in any of its boxes.
    """
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    counts: Dict[ObjectClass, np.ndarray] = defaultdict(lambda: np.zeros(num_bins, dtype=np.int64))
    for frame in frames:
        pts = np.asarray(frame.points)
        for label in frame.labels:
            if label.dont_care or label.box is None:
                continue
            inside = points_in_box(pts[:, :3], label.box, margin=0.0)
            r = np.clip(pts[inside, 3].astype(np.float64), 0.0, 1.0)
            counts[label.object_class] += np.histogram(r, bins=edges)[0]

    rows = []
    for cls in ObjectClass:
        hist = counts[cls]
        total = hist.sum()
        for b in range(num_bins):
            rows.append({
                "class": cls.value,
                "bin_lo": float(edges[b]),
                "bin_hi": float(edges[b + 1]),
                "count": int(hist[b]),
                "fraction": float(hist[b] / total) if total else 0.0,
            })
    return pd.DataFrame(rows, columns=STATS_COLUMNS)


def write_stats(table: pd.DataFrame, path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    table.to_csv(path, index=False)
