"""Page and table annotations: the on-disk training format and the evaluation ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from .geometry import Box, Point, QuadBox, interp_polyline, points_hull

Polyline = Tuple[Point, ...]
PointMap = Callable[[np.ndarray], np.ndarray]


def _as_points(arr: np.ndarray) -> Tuple[Point, ...]:
    return tuple((float(x), float(y)) for x, y in np.asarray(arr, dtype=np.float64).reshape(-1, 2))


def _map(fn: PointMap, points: Sequence[Point]) -> Tuple[Point, ...]:
    return _as_points(fn(np.asarray(points, dtype=np.float64).reshape(-1, 2)))


@dataclass(frozen=True)
class TextBox:
    id: int
    polygon: Tuple[Point, ...]

    def bbox(self) -> Box:
        return points_hull(np.asarray(self.polygon))

    def shape(self) -> Polygon:
        return Polygon(self.polygon).buffer(0)


@dataclass(frozen=True)
class CellAnnotation:
    start_row: int
    end_row: int
    start_col: int
    end_col: int
    texts: Tuple[TextBox, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.texts

    @property
    def span(self) -> Tuple[int, int, int, int]:
        return (self.start_row, self.end_row, self.start_col, self.end_col)


@dataclass(frozen=True)
class WarpParams:
    amplitude: float
    wavelength: float
    phase_x: float = 0.0
    phase_y: float = 0.0


@dataclass(frozen=True)
class TableAnnotation:
    """One table. Separators are the interior lines only: rows - 1 and cols - 1 of them.

    Row separators run left to right (x increasing); column separators run top to
    bottom. `outline` is the table border, clockwise from the top-left corner.
    """

    quad: QuadBox
    outline: Tuple[Point, ...]
    rows: int
    cols: int
    row_separators: Tuple[Polyline, ...]
    col_separators: Tuple[Polyline, ...]
    cells: Tuple[CellAnnotation, ...]
    ruling: str = "none"
    warp: Optional[WarpParams] = None

    @property
    def bbox(self) -> Box:
        return points_hull(np.asarray(self.outline))

    def text_boxes(self) -> List[TextBox]:
        return [t for c in self.cells for t in c.texts]

    def transformed(self, fn: PointMap) -> "TableAnnotation":
        """Apply a point mapping to every piece of geometry."""
        cells = tuple(
            replace(c, texts=tuple(TextBox(t.id, _map(fn, t.polygon)) for t in c.texts))
            for c in self.cells
        )
        return replace(
            self,
            quad=QuadBox(_map(fn, self.quad.points)),
            outline=_map(fn, self.outline),
            row_separators=tuple(_map(fn, line) for line in self.row_separators),
            col_separators=tuple(_map(fn, line) for line in self.col_separators),
            cells=cells,
        )


@dataclass(frozen=True)
class DocAnnotation:
    image: str
    width: int
    height: int
    tables: Tuple[TableAnnotation, ...] = ()
    page_text: Tuple[TextBox, ...] = field(default_factory=tuple)

    def transformed(self, fn: PointMap, width: int, height: int) -> "DocAnnotation":
        return replace(
            self,
            width=width,
            height=height,
            tables=tuple(t.transformed(fn) for t in self.tables),
            page_text=tuple(TextBox(t.id, _map(fn, t.polygon)) for t in self.page_text),
        )


# ---------------------------------------------------------------- validation

def _monotone(line: Polyline, axis: int) -> bool:
    values = np.asarray(line, dtype=np.float64)[:, axis]
    return len(values) >= 2 and bool(np.all(np.diff(values) > 0))


def _inside_band(points: np.ndarray, lower: Optional[Polyline], upper: Optional[Polyline], axis: int) -> bool:
    """Strictly between two separators; None stands for the table border."""
    along, across = points[:, axis], points[:, 1 - axis]
    if lower is not None and np.any(across <= interp_polyline(lower, along, axis)):
        return False
    if upper is not None and np.any(across >= interp_polyline(upper, along, axis)):
        return False
    return True


def _span_coverage(table: TableAnnotation, details: List[Dict[str, str]], prefix: str) -> None:
    covered = np.zeros((table.rows, table.cols), dtype=np.int64)
    for c in table.cells:
        if not (0 <= c.start_row <= c.end_row < table.rows and 0 <= c.start_col <= c.end_col < table.cols):
            details.append({"field": f"{prefix}.cells", "reason": "span_outside_grid"})
            return
        covered[c.start_row:c.end_row + 1, c.start_col:c.end_col + 1] += 1
    if np.any(covered != 1):
        details.append({"field": f"{prefix}.cells", "reason": "spans_do_not_partition_grid"})


def _anchors(table: TableAnnotation, details: List[Dict[str, str]], prefix: str) -> None:
    """Every grid row and column needs a non-empty cell of span one in that direction."""
    row_ok = np.zeros(table.rows, bool)
    col_ok = np.zeros(table.cols, bool)
    for c in table.cells:
        if c.empty:
            continue
        if c.start_row == c.end_row:
            row_ok[c.start_row] = True
        if c.start_col == c.end_col:
            col_ok[c.start_col] = True
    if not row_ok.all():
        details.append({"field": f"{prefix}.cells", "reason": "row_without_anchor_text"})
    if not col_ok.all():
        details.append({"field": f"{prefix}.cells", "reason": "col_without_anchor_text"})


def validate_table(table: TableAnnotation, prefix: str = "table") -> List[Dict[str, str]]:
    details: List[Dict[str, str]] = []
    if table.rows < 1 or table.cols < 1:
        details.append({"field": f"{prefix}.rows", "reason": "must_be_positive"})
        return details
    if len(table.row_separators) != table.rows - 1:
        details.append({"field": f"{prefix}.row_separators", "reason": "count_mismatch"})
    if len(table.col_separators) != table.cols - 1:
        details.append({"field": f"{prefix}.col_separators", "reason": "count_mismatch"})
    if not all(_monotone(line, 0) for line in table.row_separators):
        details.append({"field": f"{prefix}.row_separators", "reason": "not_single_valued"})
    if not all(_monotone(line, 1) for line in table.col_separators):
        details.append({"field": f"{prefix}.col_separators", "reason": "not_single_valued"})
    if table.warp is not None and table.warp.amplitude >= table.warp.wavelength / 8.0:
        details.append({"field": f"{prefix}.warp", "reason": "not_invertible"})
    if details:
        return details

    _span_coverage(table, details, prefix)
    _anchors(table, details, prefix)

    rows = (None,) + tuple(table.row_separators) + (None,)
    cols = (None,) + tuple(table.col_separators) + (None,)
    outline = Polygon(table.outline).buffer(0.5)
    for c in table.cells:
        for t in c.texts:
            pts = np.asarray(t.polygon, dtype=np.float64)
            inside = (
                _inside_band(pts, rows[c.start_row], rows[c.end_row + 1], axis=0)
                and _inside_band(pts, cols[c.start_col], cols[c.end_col + 1], axis=1)
                and outline.contains(Polygon(t.polygon))
            )
            if not inside:
                details.append({"field": f"{prefix}.text.{t.id}", "reason": "text_outside_cell"})
    return details


def validate_annotation(doc: DocAnnotation) -> List[Dict[str, str]]:
    details: List[Dict[str, str]] = []
    if doc.width < 1 or doc.height < 1:
        details.append({"field": "size", "reason": "must_be_positive"})
    for i, table in enumerate(doc.tables):
        details.extend(validate_table(table, prefix=f"tables.{i}"))
        box = table.bbox
        if box.x < -0.5 or box.y < -0.5 or box.x2 > doc.width + 0.5 or box.y2 > doc.height + 0.5:
            details.append({"field": f"tables.{i}.outline", "reason": "outside_page"})
    return details
