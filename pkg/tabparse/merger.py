"""Grid-CNN cell merging.

Every grid cell gets a feature vector; three 3x3 convolutions mix them over the
M x N grid; a relation MLP scores each 4-adjacent pair; pairs above threshold
are merged into rectangular spans.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from shapely.geometry import Polygon

from .annotation import CellAnnotation, TableAnnotation
from .config import Config
from .detector import ohem_select
from .geometry import Box, QuadBox, spatial_compat_tensor
from .grid import CellGrid
from .ops import normal_init, roi_align_boxes

Cell = Tuple[int, int]
Pair = Tuple[Cell, Cell]


@dataclass
class StructureCell:
    start_row: int
    end_row: int
    start_col: int
    end_col: int
    quad: Optional[QuadBox] = None
    content_ids: Tuple[int, ...] = ()

    @property
    def span(self) -> Tuple[int, int, int, int]:
        return (self.start_row, self.end_row, self.start_col, self.end_col)

    @property
    def rowspan(self) -> int:
        return self.end_row - self.start_row + 1

    @property
    def colspan(self) -> int:
        return self.end_col - self.start_col + 1


@dataclass
class TableStructure:
    rows: int
    cols: int
    cells: List[StructureCell] = field(default_factory=list)

    def grid_owner(self) -> np.ndarray:
        """(rows, cols) array of cell indices; -1 where nothing covers the grid element."""
        owner = np.full((self.rows, self.cols), -1, dtype=np.int64)
        for k, c in enumerate(self.cells):
            owner[c.start_row:c.end_row + 1, c.start_col:c.end_col + 1] = k
        return owner


def structure_from_annotation(table: TableAnnotation) -> TableStructure:
    cells = [StructureCell(c.start_row, c.end_row, c.start_col, c.end_col,
                           content_ids=tuple(t.id for t in c.texts)) for c in table.cells]
    cells.sort(key=lambda c: (c.start_row, c.start_col))
    return TableStructure(table.rows, table.cols, cells)


# ---------------------------------------------------------------- network

class CellMerger(nn.Module):
    def __init__(self, channels: int = 64, grid_dim: int = 512, hidden: int = 512, pool: int = 7):
        super().__init__()
        self.pool = pool
        self.cell_head = nn.Sequential(
            nn.Linear(channels * pool * pool, grid_dim), nn.ReLU(inplace=True),
            nn.Linear(grid_dim, grid_dim), nn.ReLU(inplace=True),
        )
        self.grid_cnn = nn.Sequential(
            nn.Conv2d(grid_dim, grid_dim, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(grid_dim, grid_dim, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(grid_dim, grid_dim, 3, padding=1),
        )
        self.relation = nn.Sequential(
            nn.Linear(2 * grid_dim + 18, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )
        normal_init([self.cell_head, self.grid_cnn, self.relation])

    def grid_features(self, p2: torch.Tensor, grid: CellGrid, stride: float, index: int = 0) -> torch.Tensor:
        return grid_features(p2[index:index + 1], grid, self.cell_head, stride, self.pool)

    def forward(self, p2: torch.Tensor, grid: CellGrid, stride: float, index: int = 0):
        """Directed scores (P, 2) for the pairs of `adjacent_pairs(grid.M, grid.N)`."""
        f = self.grid_features(p2, grid, stride, index)
        f = grid_cnn(f, self.grid_cnn)
        return score_pairs(f, grid, self.relation)


def _hull_xywh(quad: QuadBox) -> Tuple[float, float, float, float]:
    box = quad.hull()
    return (box.x, box.y, max(box.w, 1.0), max(box.h, 1.0))


def grid_features(p2: torch.Tensor, grid: CellGrid, head: nn.Module, stride: float, pool: int = 7) -> torch.Tensor:
    """(M, N, D) per-cell features from RoI-aligned cell hulls."""
    m, n = grid.M, grid.N
    quads = [grid.cell(i, j) for i in range(m) for j in range(n)]
    valid = [q.area >= 1.0 for q in quads]
    if not all(valid):
        logger.warning("{} degenerate cells get zero features", valid.count(False))

    dim = head[-2].out_features
    out = p2.new_zeros((m * n, dim))
    keep = [k for k, ok in enumerate(valid) if ok]
    if keep:
        boxes = torch.tensor([quads[k].hull().to_xyxy() for k in keep], dtype=p2.dtype, device=p2.device)
        feats = roi_align_boxes(p2, boxes, stride, pool).flatten(1)
        out = out.index_copy(0, torch.tensor(keep, device=p2.device), head(feats))
    return out.view(m, n, dim)


def grid_cnn(features: torch.Tensor, convs: nn.Module) -> torch.Tensor:
    """(M, N, D) -> (M, N, D) through the grid convolutions."""
    x = features.permute(2, 0, 1).unsqueeze(0)
    return convs(x).squeeze(0).permute(1, 2, 0)


def adjacent_pairs(m: int, n: int) -> List[Pair]:
    pairs = []
    for i in range(m):
        for j in range(n):
            if j + 1 < n:
                pairs.append(((i, j), (i, j + 1)))
            if i + 1 < m:
                pairs.append(((i, j), (i + 1, j)))
    return pairs


def score_pairs(features: torch.Tensor, grid: CellGrid, relation: nn.Module) -> torch.Tensor:
    """Directed relation scores (P, 2): column 0 scores x_ij, column 1 scores x_ji."""
    pairs = adjacent_pairs(grid.M, grid.N)
    if not pairs:
        return features.new_zeros((0, 2))
    a = torch.tensor([i * grid.N + j for (i, j), _ in pairs], device=features.device)
    b = torch.tensor([i * grid.N + j for _, (i, j) in pairs], device=features.device)
    flat = features.reshape(grid.M * grid.N, -1)
    boxes = torch.tensor([_hull_xywh(grid.cell(i, j)) for i in range(grid.M) for j in range(grid.N)],
                         dtype=features.dtype, device=features.device)

    fa, fb, ba, bb = flat[a], flat[b], boxes[a], boxes[b]
    x_ij = torch.cat([fa, spatial_compat_tensor(ba, bb), fb], dim=1)
    x_ji = torch.cat([fb, spatial_compat_tensor(bb, ba), fa], dim=1)
    scores = torch.sigmoid(relation(torch.cat([x_ij, x_ji], dim=0))).squeeze(1)
    return torch.stack([scores[:len(pairs)], scores[len(pairs):]], dim=1)


def final_scores(directed: torch.Tensor) -> np.ndarray:
    return directed.max(dim=1).values.detach().cpu().numpy() if directed.numel() else np.zeros(0)


# ---------------------------------------------------------------- training labels

def _extended(line: Sequence, axis: int, low: float, high: float) -> np.ndarray:
    pts = np.asarray(line, dtype=np.float64).reshape(-1, 2)
    pts = pts[np.argsort(pts[:, axis], kind="stable")]
    head, tail = pts[0].copy(), pts[-1].copy()
    head[axis], tail[axis] = low, high
    return np.vstack([head, pts, tail])


def _edge(axis: int, position: float, low: float, high: float) -> np.ndarray:
    if axis == 0:
        return np.array([[low, position], [high, position]])
    return np.array([[position, low], [position, high]])


def _band(before: np.ndarray, after: np.ndarray) -> Polygon:
    return Polygon(np.vstack([before, after[::-1]])).buffer(0)


def gt_cell_polygons(table: TableAnnotation, size: Tuple[int, int], pad: float = 64.0) -> List[Tuple[CellAnnotation, Polygon]]:
    """Ground-truth cell regions bounded by the annotated centre lines, for a table in crop coordinates."""
    h, w = size
    rows = [_edge(0, -pad, -pad, w + pad)]
    rows += [_extended(line, 0, -pad, w + pad) for line in table.row_separators]
    rows += [_edge(0, h + pad, -pad, w + pad)]
    cols = [_edge(1, -pad, -pad, h + pad)]
    cols += [_extended(line, 1, -pad, h + pad) for line in table.col_separators]
    cols += [_edge(1, w + pad, -pad, h + pad)]

    out = []
    for c in table.cells:
        region = _band(rows[c.start_row], rows[c.end_row + 1]).intersection(
            _band(cols[c.start_col], cols[c.end_col + 1]))
        out.append((c, region))
    return out


def assign_cells(grid: CellGrid, gt: Sequence[Tuple[CellAnnotation, Polygon]], min_ratio: float = 0.5) -> np.ndarray:
    """(M, N) index of the assigned GT cell, -1 when no overlap ratio exceeds `min_ratio`."""
    assigned = np.full((grid.M, grid.N), -1, dtype=np.int64)
    for i in range(grid.M):
        for j in range(grid.N):
            det = grid.cell(i, j).polygon()
            if det.area <= 0:
                continue
            ratios = [det.intersection(poly).area / det.area for _, poly in gt]
            if ratios and max(ratios) > min_ratio:
                assigned[i, j] = int(np.argmax(ratios))
    return assigned


def label_pairs(grid: CellGrid, gt: Sequence[Tuple[CellAnnotation, Polygon]]) -> np.ndarray:
    """1 positive, 0 negative, -1 ignore, aligned with `adjacent_pairs(grid.M, grid.N)`."""
    assigned = assign_cells(grid, gt)
    labels = []
    for a, b in adjacent_pairs(grid.M, grid.N):
        ga, gb = assigned[a], assigned[b]
        if ga < 0 or gb < 0:
            labels.append(-1)
        else:
            labels.append(1 if ga == gb else 0)
    return np.asarray(labels, dtype=np.int64)


def ohem_select_pairs(losses: np.ndarray, labels: np.ndarray, num_pos: int = 64, num_neg: int = 64) -> np.ndarray:
    return ohem_select(losses, labels, num_pos, num_neg)


def merge_loss(scores: torch.Tensor, labels: torch.Tensor, num_pos: int = 64, num_neg: int = 64) -> torch.Tensor:
    """Mean BCE over OHEM-selected samples; `scores` and `labels` are flat, labels in {1, 0, -1}."""
    scores = scores.reshape(-1)
    labels = labels.reshape(-1)
    usable = labels >= 0
    if not bool(usable.any()):
        return scores.new_zeros(())
    target = labels.clamp(min=0).to(scores.dtype)
    per_sample = F.binary_cross_entropy(scores.clamp(1e-7, 1 - 1e-7), target, reduction="none")
    picked = ohem_select_pairs(per_sample.detach().cpu().numpy(), labels.cpu().numpy(), num_pos, num_neg)
    if len(picked) == 0:
        return scores.new_zeros(())
    return per_sample[torch.as_tensor(picked, device=scores.device)].mean()


# ---------------------------------------------------------------- inference

class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _overlaps(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> bool:
    return not (a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2])


def _rectangles(m: int, n: int, pairs: Sequence[Pair], scores: np.ndarray, threshold: float) -> List[Tuple[int, int, int, int]]:
    groups = _DisjointSet(m * n)
    for ((i, j), (k, l)), s in zip(pairs, scores):
        if s >= threshold:
            groups.union(i * n + j, k * n + l)

    members: Dict[int, List[Cell]] = {}
    for i in range(m):
        for j in range(n):
            members.setdefault(groups.find(i * n + j), []).append((i, j))
    rects = [(min(r for r, _ in cells), max(r for r, _ in cells), min(c for _, c in cells), max(c for _, c in cells))
             for cells in members.values()]

    merged = True
    while merged:
        merged = False
        for x in range(len(rects)):
            for y in range(x + 1, len(rects)):
                if _overlaps(rects[x], rects[y]):
                    a, b = rects[x], rects[y]
                    rects[x] = (min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3]))
                    del rects[y]
                    merged = True
                    break
            if merged:
                break
    return sorted(rects, key=lambda r: (r[0], r[2]))


def span_quad(grid: CellGrid, start_row: int, end_row: int, start_col: int, end_col: int) -> QuadBox:
    tl = grid.cell(start_row, start_col).points[0]
    tr = grid.cell(start_row, end_col).points[1]
    br = grid.cell(end_row, end_col).points[2]
    bl = grid.cell(end_row, start_col).points[3]
    quad = QuadBox.try_from_points([tl, tr, br, bl])
    if quad is None:
        pts = np.array([tl, tr, br, bl])
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        quad = QuadBox.from_box(Box(float(x1), float(y1), max(float(x2 - x1), 1.0), max(float(y2 - y1), 1.0)))
    return quad


def apply_merges(grid: CellGrid, scores: np.ndarray, threshold: float = Config.MERGE_THRESHOLD) -> TableStructure:
    """Cells from merge scores aligned with `adjacent_pairs(grid.M, grid.N)`."""
    pairs = adjacent_pairs(grid.M, grid.N)
    rects = _rectangles(grid.M, grid.N, pairs, np.asarray(scores, dtype=np.float64).reshape(-1), threshold)
    cells = [StructureCell(sr, er, sc, ec, span_quad(grid, sr, er, sc, ec)) for sr, er, sc, ec in rects]
    return TableStructure(grid.M, grid.N, cells)


def oracle_scores(grid_m: int, grid_n: int, structure: TableStructure) -> np.ndarray:
    """1.0 for pairs inside the same annotated span, else 0.0."""
    owner = structure.grid_owner()
    return np.array([1.0 if owner[a] == owner[b] else 0.0 for a, b in adjacent_pairs(grid_m, grid_n)])
