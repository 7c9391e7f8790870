# src/utils/spatial_index.py

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

# Marks a query row with no neighbour in range
EMPTY = -1
# Widens the scanned cell range so float rounding of (c ± r) / cell never drops a cell
_COVER_SLACK = 1e-9


def squared_distance(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """
    Elementwise |p - c|^2 with broadcasting. Both the hashed and the linear-scan
    query go through this one expression so their membership tests agree bit for bit.
    """
    d = points - center
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _cells(positions: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor(positions / cell_size).astype(np.int64)


@dataclass(frozen=True)
class GridHashIndex:
    """
    Uniform hash grid over 3-D positions. Each point index lives in exactly one
    bucket keyed by floor(position / cell_size); buckets hold ascending indices.
    """
    cell_size: float
    positions: np.ndarray
    buckets: Dict[Tuple[int, int, int], np.ndarray] = field(repr=False)

    def __len__(self) -> int:
        return int(self.positions.shape[0])


def build_index(positions: np.ndarray, cell_size: float) -> GridHashIndex:
    if cell_size <= 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
    pos.setflags(write=False)
    buckets: Dict[Tuple[int, int, int], np.ndarray] = {}
    if pos.shape[0]:
        keys, inverse = np.unique(_cells(pos, cell_size), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        splits = np.cumsum(np.bincount(inverse, minlength=keys.shape[0]))[:-1]
        for key, members in zip(keys, np.split(order, splits)):
            buckets[tuple(int(c) for c in key)] = members
    return GridHashIndex(cell_size=float(cell_size), positions=pos, buckets=buckets)


def _select_first_k(candidates: np.ndarray, inside: np.ndarray, k: int) -> np.ndarray:
    """
    candidates: ascending point indices (C,); inside: (Q, C) membership mask.
    Keeps the first k members per row by index and pads with the first member.
    """
    rows = inside.shape[0]
    out = np.full((rows, k), EMPTY, dtype=np.int64)
    if candidates.size == 0:
        return out
    counts = inside.sum(axis=1)
    # stable sort on "not inside" moves members to the front in candidate order
    first = np.argsort(~inside, axis=1, kind="stable")[:, :k]
    picked = candidates[first]
    if picked.shape[1] < k:
        picked = np.pad(picked, ((0, 0), (0, k - picked.shape[1])))
    slots = np.arange(k)[None, :]
    picked = np.where(slots < counts[:, None], picked, picked[:, :1])
    hit = counts > 0
    out[hit] = picked[hit]
    return out


def ball_query_many(index: GridHashIndex, centers: np.ndarray, radius: float, k: int) -> np.ndarray:
    """
    Batched ball query: (M, k) point indices, EMPTY rows where nothing is in range.
    Selection is the first k in-range points by ascending index, padded by
    repeating the first one.
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ctr = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    out = np.full((ctr.shape[0], k), EMPTY, dtype=np.int64)
    if ctr.shape[0] == 0 or len(index) == 0:
        return out

    reach = int(math.ceil(radius * (1.0 + _COVER_SLACK) / index.cell_size))
    offsets = np.stack(np.meshgrid(*[np.arange(-reach, reach + 1)] * 3, indexing="ij"), -1).reshape(-1, 3)
    r2 = radius * radius

    query_cells, inverse = np.unique(_cells(ctr, index.cell_size), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for cell_id, cell in enumerate(query_cells):
        members = [index.buckets.get(tuple(int(c) for c in cell + off)) for off in offsets]
        members = [m for m in members if m is not None]
        rows = np.flatnonzero(inverse == cell_id)
        if not members:
            continue
        candidates = np.sort(np.concatenate(members))
        d2 = squared_distance(index.positions[candidates][None, :, :], ctr[rows][:, None, :])
        out[rows] = _select_first_k(candidates, d2 <= r2, k)
    return out


def ball_query(index: GridHashIndex, center: np.ndarray, radius: float, k: int) -> Optional[np.ndarray]:
    """k neighbour indices of one center, or None when no point is within radius."""
    row = ball_query_many(index, np.asarray(center, dtype=np.float64).reshape(1, 3), radius, k)[0]
    return None if row[0] == EMPTY else row


def ball_query_bruteforce(positions: np.ndarray, center: np.ndarray, radius: float, k: int) -> Optional[np.ndarray]:
    """Linear-scan reference with the same selection and padding contract as ball_query."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ctr = np.asarray(center, dtype=np.float64).reshape(3)
    found = np.flatnonzero(squared_distance(pos, ctr) <= radius * radius)
    if found.size == 0:
        return None
    picked = found[:k]
    return np.concatenate([picked, np.full(k - picked.size, picked[0], dtype=np.int64)]).astype(np.int64)


def neighbor_counts(indices: np.ndarray) -> np.ndarray:
    """
    Number of distinct neighbours per ball-query row. Selected indices ascend
    strictly and padding repeats the first, so the count is the ascending prefix.
    """
    idx = np.asarray(indices)
    if idx.shape[1] == 0:
        return np.zeros(idx.shape[0], dtype=np.int64)
    ascending = np.diff(idx, axis=1) > 0
    prefix = np.cumprod(ascending, axis=1).sum(axis=1) if idx.shape[1] > 1 else 0
    counts = 1 + prefix
    return np.where(idx[:, 0] == EMPTY, 0, counts).astype(np.int64)
