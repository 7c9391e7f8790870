# src/roi/pointgfe.py
"""
PointGFE: per-point local geometry encoding.

Each stage joins a point's feature row with the offset to each of its k
ball-query neighbours, runs the joined vectors through Linear-ReLU-Linear-ReLU
and keeps the channelwise max over the k slots. Three stages are stacked and
their outputs concatenated.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.nn.bundle import TensorSpec, WeightBundle
from src.nn.functional import affine_forward, relu
from src.utils.errors import ShapeError
from src.utils.spatial_index import ball_query_many, build_index

NUM_STAGES = 3


@dataclass(frozen=True)
class PointGFEConfig:
    radius: float = 0.8
    k: int = 9
    stage_widths: Tuple[int, ...] = (32, 32, 64)
    in_channels: int = 5

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.radius <= 0:
            raise ValueError(f"PointGFE radius must be > 0, got {self.radius}")
        if self.k < 1:
            raise ValueError(f"PointGFE k must be >= 1, got {self.k}")
        if len(self.stage_widths) != NUM_STAGES or min(self.stage_widths) < 1:
            raise ValueError(f"PointGFE needs exactly {NUM_STAGES} positive stage widths, got {self.stage_widths}")

    @property
    def out_channels(self) -> int:
        return sum(self.stage_widths)

    def stage_inputs(self) -> List[int]:
        return [self.in_channels] + list(self.stage_widths[:-1])


class StageWeights(NamedTuple):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


def stage_prefix(stage: int) -> str:
    return f"gfe.stage{stage}"


def pointgfe_manifest(config: PointGFEConfig) -> List[TensorSpec]:
    """Stage s: W1 (Cout, Cin + 3), b1 (Cout,), W2 (Cout, Cout), b2 (Cout,)."""
    specs = []
    for stage, (cin, cout) in enumerate(zip(config.stage_inputs(), config.stage_widths), start=1):
        p = stage_prefix(stage)
        specs += [
            TensorSpec(f"{p}.W1", (cout, cin + 3)),
            TensorSpec(f"{p}.b1", (cout,), fan_in=cin + 3),
            TensorSpec(f"{p}.W2", (cout, cout)),
            TensorSpec(f"{p}.b2", (cout,), fan_in=cout),
        ]
    return specs


def load_stage_weights(bundle: WeightBundle, config: PointGFEConfig) -> List[StageWeights]:
    stages = []
    for stage, (cin, cout) in enumerate(zip(config.stage_inputs(), config.stage_widths), start=1):
        p = stage_prefix(stage)
        stages.append(StageWeights(
            W1=bundle.get(f"{p}.W1", (cout, cin + 3)),
            b1=bundle.get(f"{p}.b1", (cout,)),
            W2=bundle.get(f"{p}.W2", (cout, cout)),
            b2=bundle.get(f"{p}.b2", (cout,)),
        ))
    return stages


def encode_local_geometry(positions: np.ndarray, neighbor_indices: np.ndarray) -> np.ndarray:
    """(N, 3) positions, (N, k) neighbour ids -> (N, k, 3) offsets neighbour - point."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    nbr = np.asarray(neighbor_indices)
    if nbr.ndim != 2 or nbr.shape[0] != pos.shape[0]:
        raise ShapeError(f"neighbour table {nbr.shape} does not match {pos.shape[0]} points")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= pos.shape[0]):
        raise IndexError(f"neighbour index out of range [0, {pos.shape[0]})")
    return pos[nbr] - pos[:, None, :]


def pointgfe_stage(point_feats: np.ndarray, offsets: np.ndarray, weights: StageWeights) -> np.ndarray:
    feats = np.asarray(point_feats, dtype=np.float64)
    offs = np.asarray(offsets, dtype=np.float64)
    if feats.ndim != 2 or offs.ndim != 3 or offs.shape[0] != feats.shape[0] or offs.shape[2] != 3:
        raise ShapeError(f"features {feats.shape} and offsets {offs.shape} do not line up")
    n, k = offs.shape[:2]
    if weights.W1.shape[1] != feats.shape[1] + 3:
        raise ShapeError(f"stage expects {weights.W1.shape[1] - 3} input channels, got {feats.shape[1]}")
    cout = weights.W2.shape[0]
    if n == 0:
        return np.zeros((0, cout), dtype=np.float64)

    joined = np.concatenate([np.broadcast_to(feats[:, None, :], (n, k, feats.shape[1])), offs], axis=2)
    hidden = relu(affine_forward(weights.W1, weights.b1, joined))
    slots = relu(affine_forward(weights.W2, weights.b2, hidden))
    return slots.max(axis=1)


def neighborhoods(positions: np.ndarray, config: PointGFEConfig) -> np.ndarray:
    """Ball-query table over the points themselves; every point finds at least itself."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    index = build_index(pos, config.radius)
    return ball_query_many(index, pos, config.radius, config.k)


def pointgfe_stack(
    points: np.ndarray,
    config: PointGFEConfig,
    bundle: WeightBundle,
    stages: Optional[Sequence[StageWeights]] = None,
) -> np.ndarray:
    """
    (N, 5) points -> (N, sum(stage_widths)) embedding. Stage 1 reads all five
    input channels, so d_da enters the encoder directly. Neighbourhoods are
    built once from the first three columns and shared by every stage.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != config.in_channels:
        raise ShapeError(f"expected (N, {config.in_channels}) points, got {pts.shape}")
    weights = list(stages) if stages is not None else load_stage_weights(bundle, config)
    if pts.shape[0] == 0:
        return np.zeros((0, config.out_channels), dtype=np.float64)

    offsets = encode_local_geometry(pts[:, :3], neighborhoods(pts[:, :3], config))
    feats = pts
    outputs = []
    for w in weights:
        feats = pointgfe_stage(feats, offsets, w)
        outputs.append(feats)
    return np.concatenate(outputs, axis=1)
