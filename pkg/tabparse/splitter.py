"""Separator prediction: the row/column spatial-CNN branches and their ground truth.

Row separators are handled in a "row frame" where x runs along the line and y
across it; column separators reuse the same code with the axes swapped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotation import TableAnnotation
from .errors import AnnotationError
from .geometry import densify_polygon, interp_polyline
from .ops import DownsampleBlock, SpatialPropagation, normal_init

ORIENTATIONS = ("row", "col")
MIN_THICKNESS = 8.0
REDUCTION = 8

BRANCHES = {
    "row": ("width", ("left_to_right", "right_to_left")),
    "col": ("height", ("top_to_bottom", "bottom_to_top")),
}


@dataclass
class SeparatorMasks:
    row: np.ndarray   # (H, W/8) probabilities
    col: np.ndarray   # (H/8, W)


@dataclass(frozen=True)
class SeparatorRegion:
    """A separator band: its centre polyline plus how far the band reaches on either side.

    `center` is in crop (x, y) coordinates and spans the whole crop along the line.
    """

    orientation: str
    center: np.ndarray
    before: float
    after: float

    @property
    def thickness(self) -> float:
        return self.before + self.after

    def extents(self, at: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        axis = 0 if self.orientation == "row" else 1
        c = interp_polyline(self.center, at, axis)
        return c - self.before, c + self.after


@dataclass
class SeparatorGT:
    size: Tuple[int, int]
    rows: List[SeparatorRegion]
    cols: List[SeparatorRegion]
    row_mask: np.ndarray     # (H, W) uint8
    col_mask: np.ndarray     # (H, W) uint8
    row_target: np.ndarray   # (H, ceil(W/8)) uint8, branch resolution
    col_target: np.ndarray   # (ceil(H/8), W) uint8


@dataclass
class SplitSamples:
    """Sampled (y, x) positions in the branch-resolution targets."""

    row_pos: np.ndarray
    row_neg: np.ndarray
    col_pos: np.ndarray
    col_neg: np.ndarray


# ---------------------------------------------------------------- network

class SplitBranch(nn.Module):
    def __init__(self, channels: int, orientation: str, kernel_width: int = 9):
        super().__init__()
        axis, directions = BRANCHES[orientation]
        self.orientation = orientation
        self.pre = nn.Conv2d(channels, channels, 3, padding=1)
        self.down = nn.Sequential(*[DownsampleBlock(channels, axis) for _ in range(3)])
        self.propagate = nn.Sequential(*[SpatialPropagation(channels, d, kernel_width) for d in directions])
        self.out = nn.Conv2d(channels, 1, 1)
        normal_init([self.pre, self.down, self.out])

    def forward(self, p2: torch.Tensor) -> torch.Tensor:
        x = self.propagate(self.down(self.pre(p2)))
        x = F.interpolate(x, size=(x.shape[2] * 4, x.shape[3] * 4), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(x))


class SplitHead(nn.Module):
    def __init__(self, channels: int = 64, kernel_width: int = 9):
        super().__init__()
        self.row = SplitBranch(channels, "row", kernel_width)
        self.col = SplitBranch(channels, "col", kernel_width)

    def forward(self, p2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.row(p2), self.col(p2)


# ---------------------------------------------------------------- ground truth

def _to_frame(points: np.ndarray, orientation: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts if orientation == "row" else pts[:, ::-1].copy()


def _extend(line: np.ndarray, length: float) -> np.ndarray:
    """Continue a row-frame polyline flat to both crop edges."""
    pts = line[np.argsort(line[:, 0], kind="stable")]
    if pts[0, 0] > 0:
        pts = np.vstack([[0.0, pts[0, 1]], pts])
    if pts[-1, 0] < length:
        pts = np.vstack([pts, [length, pts[-1, 1]]])
    return pts


def _expand(center: np.ndarray, obstacles: Sequence[np.ndarray], across: float, index: int,
            orientation: str) -> Tuple[float, float]:
    """Shift the line up and down until it touches an obstacle or the crop edge."""
    before = max(float(center[:, 1].min()), 0.0)
    after = max(float(across - center[:, 1].max()), 0.0)
    for obstacle in obstacles:
        diff = obstacle[:, 1] - interp_polyline(center, obstacle[:, 0])
        if diff.min() <= 0 <= diff.max():
            raise AnnotationError(
                "Separation line crosses a non-spanning cell's text.",
                [{"field": f"{orientation}_separators.{index}", "reason": "intersects_text"}],
            )
        if diff.max() < 0:
            before = min(before, float(-diff.max()))
        else:
            after = min(after, float(diff.min()))

    if before + after < MIN_THICKNESS:
        return MIN_THICKNESS / 2, MIN_THICKNESS / 2
    return before, after


def _regions(table: TableAnnotation, orientation: str, size: Tuple[int, int]) -> List[SeparatorRegion]:
    h, w = size
    along, across = (w, h) if orientation == "row" else (h, w)
    lines = table.row_separators if orientation == "row" else table.col_separators

    regions = []
    for i, line in enumerate(lines):
        k = i + 1
        obstacles = []
        for cell in table.cells:
            start, end = (cell.start_row, cell.end_row) if orientation == "row" else (cell.start_col, cell.end_col)
            if start < k <= end:
                continue
            obstacles.extend(_to_frame(densify_polygon(t.polygon), orientation) for t in cell.texts)

        center = _extend(_to_frame(np.asarray(line), orientation), along)
        before, after = _expand(center, obstacles, across, i, orientation)
        regions.append(SeparatorRegion(orientation, _to_frame(center, orientation), before, after))
    return regions


def _rasterize(regions: Sequence[SeparatorRegion], along: int, across: int) -> np.ndarray:
    """Exact per-column rasterization in the row frame: a pixel is set when its centre lies in a band."""
    mask = np.zeros((across, along), dtype=bool)
    at = np.arange(along) + 0.5
    centres = (np.arange(across) + 0.5)[:, None]
    for r in regions:
        lo, hi = r.extents(at)
        mask |= (centres >= lo[None, :]) & (centres <= hi[None, :])
    return mask.astype(np.uint8)


def _reduce(mask: np.ndarray, axis: int) -> np.ndarray:
    """Any-overlap pooling by blocks of REDUCTION along `axis`."""
    n = mask.shape[axis]
    blocks = -(-n // REDUCTION)
    pad = [(0, 0), (0, 0)]
    pad[axis] = (0, blocks * REDUCTION - n)
    padded = np.pad(mask, pad)
    if axis == 1:
        return padded.reshape(mask.shape[0], blocks, REDUCTION).max(axis=2)
    return padded.reshape(blocks, REDUCTION, mask.shape[1]).max(axis=1)


def rasterize_separator_gt(rows: Sequence[SeparatorRegion], cols: Sequence[SeparatorRegion],
                           crop_size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(row_mask, col_mask) at crop resolution and (row_target, col_target) at branch resolution."""
    h, w = crop_size
    row_mask = _rasterize(rows, w, h)
    col_mask = _rasterize(cols, h, w).T.copy()
    return row_mask, col_mask, _reduce(row_mask, axis=1), _reduce(col_mask, axis=0)


def make_separator_gt(table: TableAnnotation, crop_size: Tuple[int, int]) -> SeparatorGT:
    """Maximal separator bands for a table given in crop coordinates."""
    rows = _regions(table, "row", crop_size)
    cols = _regions(table, "col", crop_size)
    row_mask, col_mask, row_target, col_target = rasterize_separator_gt(rows, cols, crop_size)
    return SeparatorGT(tuple(crop_size), rows, cols, row_mask, col_mask, row_target, col_target)


# ---------------------------------------------------------------- sampling and loss

def _sample(target: np.ndarray, value: int, count: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.nonzero(target == value)
    if len(ys) > count:
        pick = np.sort(rng.choice(len(ys), size=count, replace=False))
        ys, xs = ys[pick], xs[pick]
    return np.stack([ys, xs], axis=1).astype(np.int64)


def sample_split_pixels(gt: SeparatorGT, per_class: int = 1024,
                        seed: Union[int, np.random.Generator, None] = 0) -> SplitSamples:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SplitSamples(
        row_pos=_sample(gt.row_target, 1, per_class, rng),
        row_neg=_sample(gt.row_target, 0, per_class, rng),
        col_pos=_sample(gt.col_target, 1, per_class, rng),
        col_neg=_sample(gt.col_target, 0, per_class, rng),
    )


def _gather(pred: torch.Tensor, index: int, target: np.ndarray, positions: Sequence[np.ndarray]):
    idx = np.concatenate([p for p in positions if len(p)], axis=0) if any(len(p) for p in positions) else None
    if idx is None:
        return pred.new_zeros(0), pred.new_zeros(0)
    ys = torch.as_tensor(idx[:, 0], device=pred.device)
    xs = torch.as_tensor(idx[:, 1], device=pred.device)
    labels = torch.as_tensor(target[idx[:, 0], idx[:, 1]], dtype=pred.dtype, device=pred.device)
    return pred[index, 0, ys, xs], labels


def _mean_bce(values: List[torch.Tensor], labels: List[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    p = torch.cat(values) if values else like.new_zeros(0)
    if p.numel() == 0:
        return like.new_zeros(())
    y = torch.cat(labels)
    return F.binary_cross_entropy(p.clamp(1e-7, 1 - 1e-7), y, reduction="mean")


def split_loss(row_pred: torch.Tensor, col_pred: torch.Tensor, gts: Sequence[SeparatorGT],
               samples: Sequence[SplitSamples]) -> torch.Tensor:
    """Mean BCE over the sampled row pixels plus mean BCE over the sampled column pixels."""
    rows_p, rows_y, cols_p, cols_y = [], [], [], []
    for b, (gt, s) in enumerate(zip(gts, samples)):
        p, y = _gather(row_pred, b, gt.row_target, (s.row_pos, s.row_neg))
        rows_p.append(p)
        rows_y.append(y)
        p, y = _gather(col_pred, b, gt.col_target, (s.col_pos, s.col_neg))
        cols_p.append(p)
        cols_y.append(y)
    return _mean_bce(rows_p, rows_y, row_pred) + _mean_bce(cols_p, cols_y, col_pred)


def masks_from_prediction(row_pred: torch.Tensor, col_pred: torch.Tensor, size: Tuple[int, int],
                          index: int = 0) -> SeparatorMasks:
    """Slice padded branch outputs back to the unpadded crop."""
    h, w = size
    row = row_pred[index, 0].detach().cpu().numpy()[:h, :-(-w // REDUCTION)]
    col = col_pred[index, 0].detach().cpu().numpy()[:-(-h // REDUCTION), :w]
    return SeparatorMasks(row.astype(np.float32), col.astype(np.float32))


def masks_from_gt(gt: SeparatorGT) -> SeparatorMasks:
    return SeparatorMasks(gt.row_target.astype(np.float32), gt.col_target.astype(np.float32))
