"""End-to-end page parsing: detect -> crop -> split -> assemble -> merge -> map back -> assign content."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from .annotation import TextBox
from .config import Config
from .detector import Detection, TableDetector, detect_tables
from .geometry import Box, QuadBox
from .grid import CellGrid, assemble_grid
from .imaging import image_to_tensor, pad_to_multiple, resize
from .merger import StructureCell, TableStructure, apply_merges, final_scores
from .ops import evaluating
from .recognizer import TableRecognizer
from .splitter import SeparatorMasks, masks_from_prediction


@dataclass(frozen=True)
class CropTransform:
    """Page -> crop: subtract the crop origin, then scale."""

    x0: float
    y0: float
    scale: float

    def to_crop(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return (pts - [self.x0, self.y0]) * self.scale

    def to_page(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts / self.scale + [self.x0, self.y0]


@dataclass
class TableResult:
    detection: Detection
    structure: TableStructure


@dataclass
class PageResult:
    image: str
    width: int
    height: int
    tables: List[TableResult] = field(default_factory=list)
    unassigned: List[int] = field(default_factory=list)

    @property
    def detections(self) -> List[Detection]:
        return [t.detection for t in self.tables]

    @property
    def structures(self) -> List[TableStructure]:
        return [t.structure for t in self.tables]


@dataclass(frozen=True)
class PageJob:
    image_id: str
    load: Callable[[], np.ndarray]
    text_boxes: Optional[Sequence[TextBox]] = None
    detections: Optional[Sequence[Detection]] = None


@dataclass
class Recognition:
    structure: TableStructure
    grid: Optional[CellGrid]
    masks: SeparatorMasks


# ---------------------------------------------------------------- stages

def crop_region(quad: QuadBox, width: int, height: int) -> Tuple[int, int, int, int]:
    """Integer (x1, y1, x2, y2) covering the quad's hull, clipped to the page."""
    hull = quad.hull()
    x1 = int(math.floor(max(0.0, hull.x)))
    y1 = int(math.floor(max(0.0, hull.y)))
    x2 = int(math.ceil(min(float(width), hull.x2)))
    y2 = int(math.ceil(min(float(height), hull.y2)))
    return x1, y1, max(x2, x1 + 1), max(y2, y1 + 1)


def crop_and_resize(image: np.ndarray, quad: QuadBox, long_side: int = Config.TSR_LONG_SIDE) -> Tuple[np.ndarray, CropTransform]:
    h, w = image.shape[:2]
    x1, y1, x2, y2 = crop_region(quad, w, h)
    region = image[y1:y2, x1:x2]
    scale = long_side / max(region.shape[:2])
    return resize(region, scale), CropTransform(float(x1), float(y1), scale)


def single_cell(size: Tuple[int, int]) -> TableStructure:
    h, w = size
    return TableStructure(1, 1, [StructureCell(0, 0, 0, 0, QuadBox.from_box(Box(0.0, 0.0, float(w), float(h))))])


@torch.no_grad()
def recognize_structure(model: TableRecognizer, crop: np.ndarray, settings=Config) -> Recognition:
    """Structure of one table crop, in crop coordinates."""
    with evaluating(model):
        return _recognize(model, crop, settings)


def _recognize(model: TableRecognizer, crop: np.ndarray, settings) -> Recognition:
    h, w = crop.shape[:2]
    device = next(model.parameters()).device
    x = image_to_tensor(pad_to_multiple(crop, 32)).unsqueeze(0).to(device)
    p2, row, col = model(x)
    masks = masks_from_prediction(row, col, (h, w))
    grid = assemble_grid(masks, (h, w), settings.SEPARATOR_THRESHOLD)
    if grid.M < 1 or grid.N < 1:
        logger.warning("fewer than two separators in one direction; emitting a single-cell table")
        return Recognition(single_cell((h, w)), None, masks)

    directed = model.merger(p2, grid, model.stride)
    structure = apply_merges(grid, final_scores(directed), settings.MERGE_THRESHOLD)
    return Recognition(structure, grid, masks)


def _clamped(quad: QuadBox, fn: Callable[[np.ndarray], np.ndarray], width: int, height: int) -> QuadBox:
    pts = fn(np.asarray(quad.points))
    pts[:, 0] = np.clip(pts[:, 0], 0, width)
    pts[:, 1] = np.clip(pts[:, 1], 0, height)
    mapped = QuadBox.try_from_points(pts.tolist())
    if mapped is not None:
        return mapped
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    return QuadBox.from_box(Box(float(x1), float(y1), max(float(x2 - x1), 1e-3), max(float(y2 - y1), 1e-3)))


def map_structure(structure: TableStructure, transform: CropTransform, width: int, height: int) -> TableStructure:
    cells = [replace(c, quad=_clamped(c.quad, transform.to_page, width, height) if c.quad is not None else None)
             for c in structure.cells]
    return TableStructure(structure.rows, structure.cols, cells)


def assign_content(text_boxes: Sequence[TextBox], structure: TableStructure,
                   min_overlap: float = Config.CONTENT_OVERLAP) -> Tuple[Dict[int, List[int]], List[int]]:
    """Text box -> cell when at least `min_overlap` of the text box lies in the cell.

    Returns ({cell index: [text ids]}, [unassigned text ids]) and fills each cell's content_ids.
    """
    polygons = [c.quad.polygon() if c.quad is not None else None for c in structure.cells]
    by_cell: Dict[int, List[int]] = {}
    unassigned: List[int] = []
    for text in text_boxes:
        shape = text.shape()
        if shape.area <= 0:
            unassigned.append(text.id)
            continue
        ratios = [shape.intersection(p).area / shape.area if p is not None else 0.0 for p in polygons]
        best = int(np.argmax(ratios)) if ratios else -1
        if best >= 0 and ratios[best] >= min_overlap:
            by_cell.setdefault(best, []).append(text.id)
        else:
            unassigned.append(text.id)

    for k, cell in enumerate(structure.cells):
        cell.content_ids = tuple(sorted(by_cell.get(k, [])))
    return by_cell, unassigned


def _in_table(text: TextBox, quad: QuadBox) -> bool:
    shape = text.shape()
    return shape.area > 0 and shape.intersection(quad.polygon()).area / shape.area >= 0.5


def parse_page(image: np.ndarray, detector: Optional[TableDetector], recognizer: TableRecognizer,
               image_id: str = "", text_boxes: Optional[Sequence[TextBox]] = None,
               detections: Optional[Sequence[Detection]] = None, settings=Config) -> PageResult:
    """Run the whole pipeline on one page.

    `detections` replaces the detector output (e.g. ground-truth table quads).
    """
    h, w = image.shape[:2]
    if detections is None:
        detections = detect_tables(detector, image, settings)

    page = PageResult(image_id, w, h)
    remaining = list(text_boxes or [])
    for det in detections:
        crop, transform = crop_and_resize(image, det.quad, settings.TSR_LONG_SIDE)
        recognition = recognize_structure(recognizer, crop, settings)
        structure = map_structure(recognition.structure, transform, w, h)
        if remaining:
            flags = [_in_table(t, det.quad) for t in remaining]
            inside = [t for t, f in zip(remaining, flags) if f]
            remaining = [t for t, f in zip(remaining, flags) if not f]
            _, missed = assign_content(inside, structure, settings.CONTENT_OVERLAP)
            page.unassigned.extend(missed)
        page.tables.append(TableResult(det, structure))
    page.unassigned.extend(t.id for t in remaining)
    logger.debug("{}: {} tables", image_id or "page", len(page.tables))
    return page


def parse_pages(jobs: Sequence[PageJob],
                detector: Optional[TableDetector], recognizer: TableRecognizer,
                workers: int = Config.WORKERS, settings=Config) -> List[PageResult]:
    """Bounded worker pool; results come back in job order."""

    def run(job: PageJob) -> PageResult:
        return parse_page(job.load(), detector, recognizer, job.image_id, job.text_boxes, job.detections, settings)

    if workers <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


def to_json(page: PageResult) -> dict:
    from .serializers import make_page_json

    return make_page_json(page)


def to_html(structure: TableStructure) -> str:
    from .serializers import make_table_html

    return make_table_html(structure)
