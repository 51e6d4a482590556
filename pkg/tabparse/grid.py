"""From separator masks to a grid of cell quads.

binarize -> connected components -> merge touching components -> polynomial
centre lines -> thickness -> implicit borders -> border-line intersections.

Column separators are processed in a transposed "row frame" (x along the
line, y across it). Fitted lines use pixel-index coordinates: a bar covering
rows 10..17 has its centre at 13.5.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from loguru import logger
from numpy.polynomial import Polynomial
from shapely.geometry import LineString, Point as ShapelyPoint

from .config import Config
from .geometry import Box, QuadBox
from .splitter import REDUCTION, SeparatorMasks

MIN_COMPONENT_PIXELS = 4
EDGE_MARGIN = 4.0
SCAN_STRIDE = 8
SAMPLE_STEP = 2.0
MAX_DEGREE = 3
MIN_EXTENT_RATIO = 0.25
MERGE_GAP = 1.0
BORDER_PAD = 64.0


@dataclass
class Component:
    ys: np.ndarray
    xs: np.ndarray
    contour: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(len(self.ys))

    def in_frame(self, orientation: str) -> Tuple[np.ndarray, np.ndarray]:
        """(along, across) pixel coordinates."""
        return (self.xs, self.ys) if orientation == "row" else (self.ys, self.xs)

    def union(self, other: "Component") -> "Component":
        return Component(np.concatenate([self.ys, other.ys]), np.concatenate([self.xs, other.xs]))


@dataclass(frozen=True)
class SeparatorLine:
    orientation: str
    center: Polynomial
    thickness: float
    extent: Tuple[float, float]
    implicit: bool = False

    def evaluate(self, at) -> np.ndarray:
        """Centre position across the line; constant beyond the fitted extent."""
        at = np.clip(np.asarray(at, dtype=np.float64), self.extent[0], self.extent[1])
        return self.center(at)

    def coefficients(self) -> np.ndarray:
        return self.center.convert().coef

    def mean_position(self) -> float:
        lo, hi = self.extent
        return float(np.mean(self.evaluate(np.linspace(lo, hi, 16))))


@dataclass
class CellGrid:
    rows: List[SeparatorLine]
    cols: List[SeparatorLine]
    cells: List[List[QuadBox]]
    points: np.ndarray        # (M+1, N+1, 2) centre-line intersections

    @property
    def M(self) -> int:
        return len(self.rows) - 1

    @property
    def N(self) -> int:
        return len(self.cols) - 1

    def cell(self, i: int, j: int) -> QuadBox:
        return self.cells[i][j]


# ---------------------------------------------------------------- masks

def binarize(mask: np.ndarray, threshold: float = Config.SEPARATOR_THRESHOLD) -> np.ndarray:
    return (np.asarray(mask) >= threshold).astype(np.uint8)


def upsample_masks(masks: SeparatorMasks, size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Branch-resolution masks back to crop resolution by block replication."""
    h, w = size
    row = np.repeat(np.asarray(masks.row), REDUCTION, axis=1)[:h, :w]
    col = np.repeat(np.asarray(masks.col), REDUCTION, axis=0)[:h, :w]
    return row, col


def extract_components(binary: np.ndarray, min_pixels: int = MIN_COMPONENT_PIXELS) -> List[Component]:
    binary = np.ascontiguousarray(binary, dtype=np.uint8)
    if not binary.any():
        return []
    count, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)

    components = []
    for label in range(1, count):
        x, y, w, h, area = stats[label]
        if area < min_pixels:
            continue
        window = (labels[y:y + h, x:x + w] == label).astype(np.uint8)
        ys, xs = np.nonzero(window)
        contours, _ = cv2.findContours(window, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        contour = max(contours, key=len).reshape(-1, 2) + np.array([x, y]) if contours else None
        components.append(Component(ys + y, xs + x, contour))
    return components


# ---------------------------------------------------------------- fitting

def _profile(component: Component, orientation: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per scan position: midpoint across the line and pixel count."""
    along, across = component.in_frame(orientation)
    order = np.argsort(along, kind="stable")
    along, across = along[order], across[order]
    positions, starts, counts = np.unique(along, return_index=True, return_counts=True)
    lo = np.minimum.reduceat(across, starts)
    hi = np.maximum.reduceat(across, starts)
    return positions.astype(np.float64), (lo + hi) / 2.0, counts.astype(np.float64)


def estimate_thickness(component: Component, orientation: str, scan_stride: int = SCAN_STRIDE) -> float:
    positions, _, counts = _profile(component, orientation)
    sampled = (positions - positions[0]) % scan_stride == 0
    if not sampled.any():
        sampled[:] = True
    return float(counts[sampled].mean())


def fit_center_line(component: Component, orientation: str) -> SeparatorLine:
    positions, mids, _ = _profile(component, orientation)
    degree = min(MAX_DEGREE, len(positions) - 1)
    center = Polynomial.fit(positions, mids, degree) if degree > 0 else Polynomial([mids[0]])
    return SeparatorLine(
        orientation=orientation,
        center=center,
        thickness=estimate_thickness(component, orientation),
        extent=(float(positions[0]), float(positions[-1])),
    )


def border_lines(line: SeparatorLine, length: float, step: float = SAMPLE_STEP,
                 pad: float = BORDER_PAD) -> Tuple[np.ndarray, np.ndarray]:
    """The two border polylines centre -/+ thickness/2, as (K, 2) crop (x, y) points."""
    half = line.thickness / 2.0
    return _offset_polyline(line, length, -half, step, pad), _offset_polyline(line, length, half, step, pad)


def center_polyline(line: SeparatorLine, length: float, step: float = SAMPLE_STEP,
                    pad: float = BORDER_PAD) -> np.ndarray:
    return _offset_polyline(line, length, 0.0, step, pad)


def _offset_polyline(line: SeparatorLine, length: float, offset: float, step: float, pad: float) -> np.ndarray:
    at = np.arange(-pad, length + pad + step / 2, step)
    pts = np.stack([at, line.evaluate(at) + offset], axis=1)
    return pts if line.orientation == "row" else pts[:, ::-1].copy()


# ---------------------------------------------------------------- merging

def _bands_touch(a: SeparatorLine, b: SeparatorLine) -> bool:
    lo = max(a.extent[0], b.extent[0])
    hi = min(a.extent[1], b.extent[1])
    reach = (a.thickness + b.thickness) / 2.0
    if lo <= hi:
        at = np.append(np.arange(lo, hi, SAMPLE_STEP), hi)
        distance = np.abs(a.evaluate(at) - b.evaluate(at))
        return bool(np.min(distance - reach) <= MERGE_GAP)

    first, second = (a, b) if a.extent[1] < b.extent[0] else (b, a)
    gap = second.extent[0] - first.extent[1]
    offset = abs(float(first.evaluate(first.extent[1])) - float(second.evaluate(second.extent[0])))
    return gap <= reach and offset <= reach


def _merge_touching(components: List[Component], orientation: str) -> List[Tuple[Component, SeparatorLine]]:
    fitted = [(c, fit_center_line(c, orientation)) for c in components]
    merged = True
    while merged:
        merged = False
        fitted.sort(key=lambda item: item[1].mean_position())
        for i in range(len(fitted)):
            for j in range(i + 1, len(fitted)):
                if _bands_touch(fitted[i][1], fitted[j][1]):
                    union = fitted[i][0].union(fitted[j][0])
                    logger.debug("merging two touching {} separators", orientation)
                    fitted = [f for k, f in enumerate(fitted) if k not in (i, j)]
                    fitted.append((union, fit_center_line(union, orientation)))
                    merged = True
                    break
            if merged:
                break
    return fitted


def separator_lines(binary: np.ndarray, orientation: str) -> List[SeparatorLine]:
    """Fitted separators of one orientation, sorted top-to-bottom / left-to-right."""
    along_length = binary.shape[1] if orientation == "row" else binary.shape[0]
    lines = []
    for component, line in _merge_touching(extract_components(binary), orientation):
        lo, hi = line.extent
        if hi - lo < 2:
            logger.warning("rejecting degenerate {} separator component of {} px", orientation, component.size)
            continue
        if hi - lo + 1 < MIN_EXTENT_RATIO * along_length:
            logger.debug("dropping short {} separator spanning {:.0f} px", orientation, hi - lo + 1)
            continue
        lines.append(line)
    return sorted(lines, key=lambda l: l.mean_position())


def _implicit(orientation: str, position: float, along_length: float) -> SeparatorLine:
    return SeparatorLine(orientation, Polynomial([position]), 0.0, (0.0, float(along_length)), implicit=True)


def with_implicit_borders(lines: Sequence[SeparatorLine], orientation: str,
                          size: Tuple[int, int]) -> List[SeparatorLine]:
    h, w = size
    along_length, across_length = (w, h) if orientation == "row" else (h, w)
    lines = list(lines)

    def reach(line: SeparatorLine) -> Tuple[float, float]:
        c = line.evaluate(np.linspace(line.extent[0], line.extent[1], 32))
        return float(c.min() - line.thickness / 2), float(c.max() + line.thickness / 2)

    if not any(reach(l)[0] <= EDGE_MARGIN for l in lines):
        lines.insert(0, _implicit(orientation, 0.0, along_length))
    if not any(reach(l)[1] >= across_length - EDGE_MARGIN for l in lines):
        lines.append(_implicit(orientation, float(across_length), along_length))
    return lines


# ---------------------------------------------------------------- intersections

def _intersection(row_line: np.ndarray, col_line: np.ndarray) -> Tuple[float, float]:
    hit = LineString(row_line).intersection(LineString(col_line))
    if not hit.is_empty:
        if isinstance(hit, ShapelyPoint):
            return hit.x, hit.y
        guess = ShapelyPoint(float(np.median(col_line[:, 0])), float(np.median(row_line[:, 1])))
        best = min((g.centroid for g in getattr(hit, "geoms", [hit])), key=guess.distance)
        return best.x, best.y
    # no crossing inside the sampled range
    x = float(np.median(col_line[:, 0]))
    y = float(np.interp(x, row_line[:, 0], row_line[:, 1]))
    logger.warning("separator borders do not cross; using approximate intersection ({:.1f}, {:.1f})", x, y)
    return x, y


def _cell_quad(tl, tr, br, bl) -> QuadBox:
    quad = QuadBox.try_from_points([tl, tr, br, bl])
    if quad is not None:
        return quad
    pts = np.array([tl, tr, br, bl])
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    logger.warning("degenerate cell at ({:.1f}, {:.1f}); using its bounding box", x1, y1)
    return QuadBox.from_box(Box(float(x1), float(y1), max(float(x2 - x1), 1.0), max(float(y2 - y1), 1.0)))


def intersect_grid(rows: Sequence[SeparatorLine], cols: Sequence[SeparatorLine], size: Tuple[int, int]) -> CellGrid:
    h, w = size
    rows = with_implicit_borders(sorted(rows, key=lambda l: l.mean_position()), "row", size)
    cols = with_implicit_borders(sorted(cols, key=lambda l: l.mean_position()), "col", size)

    row_borders = [border_lines(l, w) for l in rows]
    col_borders = [border_lines(l, h) for l in cols]
    row_centres = [center_polyline(l, w) for l in rows]
    col_centres = [center_polyline(l, h) for l in cols]
    points = np.array([[_intersection(r, c) for c in col_centres] for r in row_centres], dtype=np.float64)

    cells = []
    for i in range(len(rows) - 1):
        top, bottom = row_borders[i][1], row_borders[i + 1][0]
        line = []
        for j in range(len(cols) - 1):
            left, right = col_borders[j][1], col_borders[j + 1][0]
            line.append(_cell_quad(
                _intersection(top, left), _intersection(top, right),
                _intersection(bottom, right), _intersection(bottom, left),
            ))
        cells.append(line)
    return CellGrid(list(rows), list(cols), cells, points)


def assemble_grid(masks: SeparatorMasks, size: Tuple[int, int],
                  threshold: float = Config.SEPARATOR_THRESHOLD) -> CellGrid:
    row_mask, col_mask = upsample_masks(masks, size)
    rows = separator_lines(binarize(row_mask, threshold), "row")
    cols = separator_lines(binarize(col_mask, threshold), "col")
    return intersect_grid(rows, cols, size)
