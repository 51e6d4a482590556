"""Static visualizations of pipeline results: detections, cells and optionally the split stage."""
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image, ImageDraw

from .grid import CellGrid, upsample_masks
from .pipeline import CropTransform, PageResult, Recognition

DETECTION = (220, 40, 40)
CELL = (40, 90, 220)
GRID = (20, 160, 60)
HEAT = np.array([255.0, 0.0, 160.0])
HEAT_ALPHA = 0.6


def _closed(points) -> List[Tuple[float, float]]:
    pts = [(float(x), float(y)) for x, y in points]
    return pts + pts[:1]


def blend_heatmap(canvas: np.ndarray, transform: CropTransform, recognition: Recognition) -> None:
    """Paint the larger of the row/column separator probabilities over the table's page region."""
    row, col = recognition.masks.row, recognition.masks.col
    ch, cw = row.shape[0], col.shape[1]
    heat = np.maximum(*upsample_masks(recognition.masks, (ch, cw)))

    h, w = canvas.shape[:2]
    x1, y1 = int(round(transform.x0)), int(round(transform.y0))
    x2 = min(w, int(round(transform.x0 + cw / transform.scale)))
    y2 = min(h, int(round(transform.y0 + ch / transform.scale)))
    if x2 <= x1 or y2 <= y1:
        return
    alpha = HEAT_ALPHA * cv2.resize(heat.astype(np.float32), (x2 - x1, y2 - y1), interpolation=cv2.INTER_LINEAR)
    region = canvas[y1:y2, x1:x2].astype(np.float64)
    canvas[y1:y2, x1:x2] = (region * (1 - alpha[..., None]) + HEAT * alpha[..., None]).astype(np.uint8)


def draw_grid(draw: ImageDraw.ImageDraw, transform: CropTransform, grid: CellGrid) -> None:
    points = grid.points
    for i in range(points.shape[0]):
        draw.line([tuple(p) for p in transform.to_page(points[i])], fill=GRID, width=1)
    for j in range(points.shape[1]):
        draw.line([tuple(p) for p in transform.to_page(points[:, j])], fill=GRID, width=1)


def render_overlay(image: np.ndarray, page: PageResult,
                   split_debug: Sequence[Tuple[CropTransform, Recognition]] = ()) -> np.ndarray:
    canvas = np.array(image, dtype=np.uint8, copy=True)
    for transform, recognition in split_debug:
        blend_heatmap(canvas, transform, recognition)

    pil = Image.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    for transform, recognition in split_debug:
        if recognition.grid is not None:
            draw_grid(draw, transform, recognition.grid)
    for table in page.tables:
        for cell in table.structure.cells:
            if cell.quad is not None:
                draw.line(_closed(cell.quad.points), fill=CELL, width=2)
        draw.line(_closed(table.detection.quad.points), fill=DETECTION, width=3)
    return np.asarray(pil)
