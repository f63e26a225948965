"""Absolute feature-vector positions from crop geometry and top-N
position-matched pair selection between two feature grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskdistill.augment import CropRecord
from maskdistill.errors import ParameterError


@dataclass
class PositionField:
    positions: np.ndarray  # H x W x 2, (l1, l2) in original-image pixels
    grid_h: int
    grid_w: int
    source: CropRecord


@dataclass
class MatchedPairs:
    # (student (row, col), teacher (row, col), distance), distance nondecreasing
    pairs: list[tuple[tuple[int, int], tuple[int, int], float]]

    def __len__(self) -> int:
        return len(self.pairs)

    def student_indices(self) -> list[tuple[int, int]]:
        return [p[0] for p in self.pairs]

    def teacher_indices(self) -> list[tuple[int, int]]:
        return [p[1] for p in self.pairs]


def feature_positions(crop: CropRecord, grid: tuple[int, int]) -> PositionField:
    """Map each grid cell to the original-image coordinates of its center.

    Cell (u, v) (1-based, u horizontal) sits at
    l1 = left + w/(2W) + (w/W)(u-1) and l2 = top + h/(2H) + (h/H)(v-1);
    a horizontal flip mirrors u before the mapping.
    """
    gh, gw = grid
    u = np.arange(1, gw + 1, dtype=np.float64)
    v = np.arange(1, gh + 1, dtype=np.float64)
    if crop.hflip:
        u = gw + 1 - u
    l1 = crop.left + crop.width / (2 * gw) + (crop.width / gw) * (u - 1)
    l2 = crop.top + crop.height / (2 * gh) + (crop.height / gh) * (v - 1)
    positions = np.empty((gh, gw, 2), dtype=np.float64)
    positions[..., 0] = l1[None, :]
    positions[..., 1] = l2[:, None]
    return PositionField(positions=positions, grid_h=gh, grid_w=gw, source=crop)


def match_pairs(pos_s: PositionField, pos_t: PositionField, n: int,
                bipartite: bool = False) -> MatchedPairs:
    """Globally smallest-N entries of the cross-field distance matrix.

    Duplicate endpoints are allowed; ties break by student then teacher
    row-major index.  ``bipartite`` forbids endpoint reuse.
    """
    ps = pos_s.positions.reshape(-1, 2)
    pt = pos_t.positions.reshape(-1, 2)
    total = ps.shape[0] * pt.shape[0]
    if n > total:
        raise ParameterError(f"requested {n} pairs but only {total} exist")
    dist = np.linalg.norm(ps[:, None, :] - pt[None, :, :], axis=2)
    flat = dist.ravel()  # row-major: index = s_idx * len(pt) + t_idx, so a
    # stable sort on distance already breaks ties by (s_idx, t_idx)
    order = np.argsort(flat, kind="stable")

    pairs = []
    used_s: set[int] = set()
    used_t: set[int] = set()
    for idx in order:
        s_idx, t_idx = divmod(int(idx), pt.shape[0])
        if bipartite and (s_idx in used_s or t_idx in used_t):
            continue
        pairs.append((divmod(s_idx, pos_s.grid_w), divmod(t_idx, pos_t.grid_w),
                      float(flat[idx])))
        used_s.add(s_idx)
        used_t.add(t_idx)
        if len(pairs) == n:
            break
    if len(pairs) < n:
        raise ParameterError(f"only {len(pairs)} bipartite pairs available, requested {n}")
    return MatchedPairs(pairs=pairs)


def overlap_area(a: CropRecord, b: CropRecord) -> float:
    """Intersection area of two crop rectangles in original-image pixels."""
    iw = min(a.left + a.width, b.left + b.width) - max(a.left, b.left)
    ih = min(a.top + a.height, b.top + b.height) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    return float(iw * ih)
