"""Synthetic table pages with exact layout annotations.

Text is drawn as runs of glyph-like boxes. Every table keeps at least MIN_GAP
pixels of white space between the text of neighbouring rows and columns, so
the maximal separator bands are always well defined.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image, ImageDraw

from .annotation import CellAnnotation, DocAnnotation, TableAnnotation, TextBox, WarpParams, validate_annotation
from .config import SynthConfig
from .errors import AnnotationError, ConfigError
from .geometry import Box, Point, QuadBox, densify_polygon, resample_polyline
from .validators import validate_synth_config

Span = Tuple[int, int, int, int]

RULINGS = ("full", "horizontal")
INK = (24, 24, 24)
RULE = (48, 48, 48)
MIN_GAP = 8
POLY_STEP = 4.0
WARP_ITERATIONS = 20


def _points(arr) -> Tuple[Point, ...]:
    return tuple((float(x), float(y)) for x, y in np.asarray(arr, dtype=np.float64).reshape(-1, 2))


def rect_polygon(x1: float, y1: float, x2: float, y2: float, step: float = POLY_STEP) -> Tuple[Point, ...]:
    """Clockwise rectangle outline sampled every `step` px; corners kept exactly."""
    corners = [(x1, y1), (x2, y1), (x2, y2), (x1, y2), (x1, y1)]
    parts = [resample_polyline([a, b], step)[:-1] for a, b in zip(corners[:-1], corners[1:])]
    return _points(np.concatenate(parts, axis=0))


# ---------------------------------------------------------------- spans

def plan_spans(rng: np.random.Generator, rows: int, cols: int, span_prob: float) -> List[Span]:
    """Row-major partition of the grid into rectangles of at most 3 x 3 grid elements."""
    owner = np.full((rows, cols), -1, dtype=np.int64)
    spans: List[Span] = []
    for r in range(rows):
        for c in range(cols):
            if owner[r, c] >= 0:
                continue
            rs = cs = 1
            if rng.random() < span_prob:
                cs = int(rng.integers(1, min(3, cols - c) + 1))
                rs = int(rng.integers(1, min(3, rows - r) + 1))
                while cs > 1 and np.any(owner[r, c:c + cs] >= 0):
                    cs -= 1
                while rs > 1 and np.any(owner[r:r + rs, c:c + cs] >= 0):
                    rs -= 1
            owner[r:r + rs, c:c + cs] = len(spans)
            spans.append((r, r + rs - 1, c, c + cs - 1))
    return spans


def ensure_anchor_spans(spans: Sequence[Span], rows: int, cols: int) -> List[Span]:
    """Split spanning cells until every row and every column owns a cell of span one."""
    spans = list(spans)
    changed = True
    while changed:
        changed = False
        for r in range(rows):
            if not any(s[0] == s[1] == r for s in spans):
                k = next(i for i, s in enumerate(spans) if s[0] <= r <= s[1])
                sr, er, sc, ec = spans[k]
                spans[k:k + 1] = [(x, x, sc, ec) for x in range(sr, er + 1)]
                changed = True
        for c in range(cols):
            if not any(s[2] == s[3] == c for s in spans):
                k = next(i for i, s in enumerate(spans) if s[2] <= c <= s[3])
                sr, er, sc, ec = spans[k]
                spans[k:k + 1] = [(sr, er, x, x) for x in range(sc, ec + 1)]
                changed = True
    return sorted(spans, key=lambda s: (s[0], s[2]))


def plan_filled(rng: np.random.Generator, spans: Sequence[Span], rows: int, cols: int, empty_prob: float) -> List[bool]:
    filled = [bool(rng.random() >= empty_prob) for _ in spans]
    for r in range(rows):
        anchors = [k for k, s in enumerate(spans) if s[0] == s[1] == r]
        if not any(filled[k] for k in anchors):
            filled[anchors[int(rng.integers(len(anchors)))]] = True
    for c in range(cols):
        anchors = [k for k, s in enumerate(spans) if s[2] == s[3] == c]
        if not any(filled[k] for k in anchors):
            filled[anchors[int(rng.integers(len(anchors)))]] = True
    return filled


# ---------------------------------------------------------------- text runs

def _words(rng: np.random.Generator, budget: int, char_width: int, space: int) -> List[int]:
    count = int(rng.integers(1, 5))
    lengths = rng.integers(1, 9, size=count)
    out: List[int] = []
    used = 0
    for n in lengths:
        extra = (space if out else 0) + int(n) * char_width
        if used + extra > budget:
            break
        out.append(int(n))
        used += extra
    return out or [max(1, budget // char_width)]


def _line_width(words: Sequence[int], char_width: int, space: int) -> int:
    return sum(words) * char_width + (len(words) - 1) * space


def _draw_words(draw: ImageDraw.ImageDraw, rng: np.random.Generator, x: int, y: int, words: Sequence[int],
                char_width: int, space: int, height: int) -> None:
    cx = x
    for n in words:
        for _ in range(n):
            h = height if rng.random() < 0.35 else max(2, int(round(height * 0.7)))
            draw.rectangle([cx, y + height - h, cx + char_width - 2, y + height - 1], fill=INK)
            cx += char_width
        cx += space


def _text_box(text_id: int, x: int, y: int, width: int, height: int) -> TextBox:
    return TextBox(text_id, rect_polygon(x, y, x + width, y + height))


# ---------------------------------------------------------------- tables

@dataclass
class TablePlan:
    """Table layout in table-local pixels; text of cell k is `words[k]`, one list per line."""

    rows: int
    cols: int
    text_height: int
    char_width: int
    space: int
    line_gap: int
    col_x: List[int]
    col_w: List[int]
    row_y: List[int]
    row_h: List[int]
    width: int
    height: int
    spans: List[Span]
    words: List[List[List[int]]]
    centred: List[bool]
    ruling: str

    @property
    def row_separators(self) -> List[float]:
        return [(self.row_y[r] + self.row_h[r] + self.row_y[r + 1]) / 2.0 for r in range(self.rows - 1)]

    @property
    def col_separators(self) -> List[float]:
        return [(self.col_x[c] + self.col_w[c] + self.col_x[c + 1]) / 2.0 for c in range(self.cols - 1)]

    def block_height(self, lines: int) -> int:
        return lines * self.text_height + max(lines - 1, 0) * self.line_gap


def _column_gaps(rng: np.random.Generator, config: SynthConfig, cols: int, room: int) -> Optional[np.ndarray]:
    base = rng.integers(2 * MIN_GAP, 3 * MIN_GAP + 1, size=cols - 1)
    blank = rng.random(cols - 1) < config.blank_col_prob
    scale = rng.uniform(1.0, config.blank_scale_max, size=cols - 1)
    wide = np.where(blank, base * scale, base).astype(np.int64)
    if wide.sum() <= room:
        return wide
    if base.sum() <= room:
        return base.astype(np.int64)
    return None


def plan_table(rng: np.random.Generator, config: SynthConfig, rows: int, cols: int, avail_w: int) -> Optional[TablePlan]:
    th = int(rng.integers(config.min_text_height, config.max_text_height + 1))
    cw = max(3, int(round(th * 0.55)))
    space = max(2, th // 2)
    line_gap = max(2, th // 3)
    pad = int(rng.integers(MIN_GAP, 2 * MIN_GAP + 1))
    min_col = 3 * cw

    while True:
        gaps = _column_gaps(rng, config, cols, avail_w - 2 * pad - cols * min_col)
        if gaps is not None:
            break
        if cols <= config.min_cols:
            return None
        cols -= 1
    budget = (avail_w - 2 * pad - int(gaps.sum())) // cols

    spans = ensure_anchor_spans(plan_spans(rng, rows, cols, config.span_prob), rows, cols)
    filled = plan_filled(rng, spans, rows, cols, config.empty_prob)
    counts = [0 if not f else (int(rng.integers(2, 4)) if rng.random() < config.multiline_prob else 1) for f in filled]

    words: List[List[List[int]]] = [[] for _ in spans]
    col_w = [min_col] * cols
    for k, (_, _, sc, ec) in enumerate(spans):
        if sc == ec:
            words[k] = [_words(rng, budget, cw, space) for _ in range(counts[k])]
            for line in words[k]:
                col_w[sc] = max(col_w[sc], _line_width(line, cw, space))
    for k, (_, _, sc, ec) in enumerate(spans):
        if sc != ec:
            avail = sum(col_w[sc:ec + 1]) + int(gaps[sc:ec].sum())
            words[k] = [_words(rng, avail, cw, space) for _ in range(counts[k])]

    def block(n: int) -> int:
        return n * th + max(n - 1, 0) * line_gap

    row_h = [th] * rows
    for k, (sr, er, _, _) in enumerate(spans):
        if sr == er:
            row_h[sr] = max(row_h[sr], block(len(words[k])))
    row_gaps = rng.integers(MIN_GAP + 4, 3 * MIN_GAP + 1, size=rows - 1)
    for k, (sr, er, _, _) in enumerate(spans):
        if sr != er:
            avail = sum(row_h[sr:er + 1]) + int(row_gaps[sr:er].sum())
            while len(words[k]) > 1 and block(len(words[k])) > avail:
                words[k].pop()

    col_x = [pad]
    for c in range(1, cols):
        col_x.append(col_x[-1] + col_w[c - 1] + int(gaps[c - 1]))
    row_y = [pad]
    for r in range(1, rows):
        row_y.append(row_y[-1] + row_h[r - 1] + int(row_gaps[r - 1]))

    centred = [bool(v) for v in rng.random(cols) < 0.3]
    ruling = str(rng.choice(RULINGS)) if rng.random() < config.ruling_prob else "none"
    return TablePlan(
        rows=rows, cols=cols, text_height=th, char_width=cw, space=space, line_gap=line_gap,
        col_x=col_x, col_w=col_w, row_y=row_y, row_h=row_h,
        width=col_x[-1] + col_w[-1] + pad, height=row_y[-1] + row_h[-1] + pad,
        spans=spans, words=words, centred=centred, ruling=ruling,
    )


def fit_table(rng: np.random.Generator, config: SynthConfig, avail_w: int, max_h: int) -> TablePlan:
    rows = int(rng.integers(config.min_rows, config.max_rows + 1))
    cols = int(rng.integers(config.min_cols, config.max_cols + 1))
    while True:
        plan = plan_table(rng, config, rows, cols, avail_w)
        if plan is not None and plan.height <= max_h:
            return plan
        if rows <= config.min_rows:
            raise ConfigError("Page is too small for the requested tables.",
                              [{"field": "page_height", "reason": "tables_do_not_fit"}])
        rows -= 1


def _draw_rulings(draw: ImageDraw.ImageDraw, plan: TablePlan, owner: np.ndarray, x0: int, y0: int) -> None:
    x_edges = [x0] + [x0 + s for s in plan.col_separators] + [x0 + plan.width]
    y_edges = [y0] + [y0 + s for s in plan.row_separators] + [y0 + plan.height]
    right, bottom = x0 + plan.width - 1, y0 + plan.height - 1

    draw.line([(x0, y0), (right, y0)], fill=RULE, width=1)
    draw.line([(x0, bottom), (right, bottom)], fill=RULE, width=1)
    for k in range(plan.rows - 1):
        for c in range(plan.cols):
            if owner[k, c] != owner[k + 1, c]:
                draw.line([(x_edges[c], y_edges[k + 1]), (x_edges[c + 1], y_edges[k + 1])], fill=RULE, width=1)
    if plan.ruling != "full":
        return
    draw.line([(x0, y0), (x0, bottom)], fill=RULE, width=1)
    draw.line([(right, y0), (right, bottom)], fill=RULE, width=1)
    for k in range(plan.cols - 1):
        for r in range(plan.rows):
            if owner[r, k] != owner[r, k + 1]:
                draw.line([(x_edges[k + 1], y_edges[r]), (x_edges[k + 1], y_edges[r + 1])], fill=RULE, width=1)


def render_table(draw: ImageDraw.ImageDraw, rng: np.random.Generator, plan: TablePlan, x0: int, y0: int,
                 ids: Iterator[int]) -> TableAnnotation:
    owner = np.full((plan.rows, plan.cols), -1, dtype=np.int64)
    for k, (sr, er, sc, ec) in enumerate(plan.spans):
        owner[sr:er + 1, sc:ec + 1] = k
    if plan.ruling != "none":
        _draw_rulings(draw, plan, owner, x0, y0)

    th, cw, space = plan.text_height, plan.char_width, plan.space
    cells = []
    for k, (sr, er, sc, ec) in enumerate(plan.spans):
        left = x0 + plan.col_x[sc]
        right = x0 + plan.col_x[ec] + plan.col_w[ec]
        top = y0 + plan.row_y[sr]
        bottom = y0 + plan.row_y[er] + plan.row_h[er]
        y = top + (bottom - top - plan.block_height(len(plan.words[k]))) // 2
        texts = []
        for line in plan.words[k]:
            w = _line_width(line, cw, space)
            x = left + (right - left - w) // 2 if plan.centred[sc] else left
            _draw_words(draw, rng, x, y, line, cw, space, th)
            texts.append(_text_box(next(ids), x, y, w, th))
            y += th + plan.line_gap
        cells.append(CellAnnotation(sr, er, sc, ec, tuple(texts)))

    w, h = plan.width, plan.height
    return TableAnnotation(
        quad=QuadBox.from_box(Box(float(x0), float(y0), float(w), float(h))),
        outline=rect_polygon(x0, y0, x0 + w, y0 + h),
        rows=plan.rows,
        cols=plan.cols,
        row_separators=tuple(_points(resample_polyline([(x0, y0 + s), (x0 + w, y0 + s)], POLY_STEP))
                             for s in plan.row_separators),
        col_separators=tuple(_points(resample_polyline([(x0 + s, y0), (x0 + s, y0 + h)], POLY_STEP))
                             for s in plan.col_separators),
        cells=tuple(cells),
        ruling=plan.ruling,
    )


def render_paragraph(draw: ImageDraw.ImageDraw, rng: np.random.Generator, config: SynthConfig, x0: int, y0: int,
                     width: int, height: int, ids: Iterator[int]) -> List[TextBox]:
    th = int(rng.integers(config.min_text_height, config.max_text_height + 1))
    cw = max(3, int(round(th * 0.55)))
    space = max(2, th // 2)
    pitch = th + max(3, th // 2)
    lines = min(height // pitch, int(rng.integers(2, 7)))

    boxes = []
    for i in range(lines):
        budget = int(width * rng.uniform(0.6, 1.0))
        words: List[int] = []
        used = 0
        while True:
            n = int(rng.integers(1, 9))
            extra = (space if words else 0) + n * cw
            if used + extra > budget:
                break
            words.append(n)
            used += extra
        if not words:
            continue
        y = y0 + i * pitch
        _draw_words(draw, rng, x0, y, words, cw, space, th)
        boxes.append(_text_box(next(ids), x0, y, _line_width(words, cw, space), th))
    return boxes


# ---------------------------------------------------------------- warping

def _displacement(points: np.ndarray, warp: WarpParams) -> np.ndarray:
    k = 2.0 * math.pi / warp.wavelength
    dx = warp.amplitude * np.sin(k * points[:, 1] + warp.phase_x)
    dy = warp.amplitude * np.sin(k * points[:, 0] + warp.phase_y)
    return np.stack([dx, dy], axis=1)


def warp_points(points, warp: WarpParams) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts + _displacement(pts, warp)


def unwarp_points(points, warp: WarpParams, iterations: int = WARP_ITERATIONS) -> np.ndarray:
    """Inverse of `warp_points` by fixed-point iteration; contracts while amplitude < wavelength / 8."""
    target = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pts = target.copy()
    for _ in range(iterations):
        pts = target - _displacement(pts, warp)
    return pts


def _resampled(table: TableAnnotation, step: float) -> TableAnnotation:
    cells = tuple(
        replace(c, texts=tuple(TextBox(t.id, _points(densify_polygon(t.polygon, step))) for t in c.texts))
        for c in table.cells
    )
    return replace(
        table,
        outline=_points(densify_polygon(table.outline, step)),
        row_separators=tuple(_points(resample_polyline(line, step)) for line in table.row_separators),
        col_separators=tuple(_points(resample_polyline(line, step)) for line in table.col_separators),
        cells=cells,
    )


def warp_curved(image: np.ndarray, annotation: DocAnnotation, amplitude: float, wavelength: float,
                phase: Tuple[float, float] = (0.0, 0.0)) -> Tuple[np.ndarray, DocAnnotation]:
    """Sinusoidal displacement of the page and every piece of its annotation."""
    if amplitude == 0:
        return image.copy(), annotation
    warp = WarpParams(float(amplitude), float(wavelength), float(phase[0]), float(phase[1]))
    if warp.amplitude >= warp.wavelength / 8.0:
        raise ConfigError("Warp amplitude must stay below wavelength / 8.",
                          [{"field": "curve_amplitude", "reason": "warp_not_invertible"}])

    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    centres = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    source = unwarp_points(centres, warp) - 0.5
    map_x = source[:, 0].reshape(h, w).astype(np.float32)
    map_y = source[:, 1].reshape(h, w).astype(np.float32)
    warped = cv2.remap(image, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=(255, 255, 255))

    dense = replace(
        annotation,
        tables=tuple(_resampled(t, POLY_STEP) for t in annotation.tables),
        page_text=tuple(TextBox(t.id, _points(densify_polygon(t.polygon, POLY_STEP))) for t in annotation.page_text),
    )
    moved = dense.transformed(lambda pts: warp_points(pts, warp), w, h)
    return warped, replace(moved, tables=tuple(replace(t, warp=warp) for t in moved.tables))


# ---------------------------------------------------------------- pages

def synthesize_page(config: SynthConfig = SynthConfig(), seed: Union[int, Sequence[int]] = 0,
                    image_id: str = "") -> Tuple[np.ndarray, DocAnnotation]:
    """One page with 1-3 tables and paragraph distractors; deterministic in (config, seed)."""
    details = validate_synth_config(config)
    if details:
        raise ConfigError("Invalid synthesis config.", details)

    rng = np.random.default_rng(seed)
    width, height, margin = config.page_width, config.page_height, config.margin
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    ids = itertools.count()

    count = int(rng.integers(config.min_tables, config.max_tables + 1))
    slot = (height - 2 * margin) / count
    avail_w = width - 2 * margin
    tables: List[TableAnnotation] = []
    page_text: List[TextBox] = []

    for t in range(count):
        top = margin + int(round(t * slot))
        room = margin + int(round((t + 1) * slot)) - top
        plan = fit_table(rng, config, avail_w, int(room * 0.85))
        free = room - plan.height
        para_h = 0
        if rng.random() < config.paragraph_prob and free > 4 * MIN_GAP:
            para_h = int(rng.integers(2 * MIN_GAP, free - 2 * MIN_GAP + 1))
        above = bool(rng.random() < 0.5)
        spare = free - (para_h + 2 * MIN_GAP if para_h else 0)
        shift = int(rng.integers(0, spare + 1))
        x0 = margin + int(rng.integers(0, avail_w - plan.width + 1))

        if para_h and above:
            page_text += render_paragraph(draw, rng, config, margin, top, avail_w, para_h, ids)
            y0 = top + para_h + 2 * MIN_GAP + shift
            tables.append(render_table(draw, rng, plan, x0, y0, ids))
        else:
            y0 = top + shift
            tables.append(render_table(draw, rng, plan, x0, y0, ids))
            if para_h:
                page_text += render_paragraph(draw, rng, config, margin, y0 + plan.height + 2 * MIN_GAP,
                                              avail_w, para_h, ids)

    image = np.asarray(canvas, dtype=np.uint8).copy()
    name = image_id or (f"{seed:04d}.png" if isinstance(seed, int) else "page.png")
    doc = DocAnnotation(name, width, height, tuple(tables), tuple(page_text))

    if rng.random() < config.curve_prob:
        phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
        image, doc = warp_curved(image, doc, config.curve_amplitude, config.curve_wavelength,
                                 (float(phase[0]), float(phase[1])))

    problems = validate_annotation(doc)
    if problems:
        raise AnnotationError("Generated annotation failed validation.", problems)
    return image, doc
