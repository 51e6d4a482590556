import os

import numpy as np
import pytest
import torch

from tabparse.annotation import CellAnnotation, TableAnnotation, TextBox
from tabparse.config import ModelConfig, SynthConfig
from tabparse.datagen import rect_polygon, synthesize_page
from tabparse.geometry import Box, QuadBox

SMALL_PAGE = SynthConfig(page_width=384, page_height=480, margin=16, max_rows=5, max_cols=4, max_tables=2)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("TABPARSE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set TABPARSE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def small_page():
    return synthesize_page(SMALL_PAGE, seed=3)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(backbone="tiny", channels=16, kernel_width=3, grid_dim=32, frcn_dim=64)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


def make_grid_table(row_lines, col_lines, width, height, spans=None, text=(20.0, 8.0), empty=()):
    """A straight table filling (0, 0, width, height) with one centred text box per cell.

    `row_lines`/`col_lines` are the interior separator positions; `spans` lists
    (start_row, end_row, start_col, end_col) rectangles, the rest of the grid
    gets 1x1 cells. `text` is the half width/height of each text box.
    """
    ys = [0.0] + [float(v) for v in row_lines] + [float(height)]
    xs = [0.0] + [float(v) for v in col_lines] + [float(width)]
    rows, cols = len(ys) - 1, len(xs) - 1

    owner = np.full((rows, cols), -1)
    spans = list(spans or [])
    for k, (sr, er, sc, ec) in enumerate(spans):
        owner[sr:er + 1, sc:ec + 1] = k
    for r in range(rows):
        for c in range(cols):
            if owner[r, c] < 0:
                owner[r, c] = len(spans)
                spans.append((r, r, c, c))

    cells = []
    for k, (sr, er, sc, ec) in enumerate(sorted(spans)):
        texts = ()
        if (sr, sc) not in empty:
            cx, cy = (xs[sc] + xs[ec + 1]) / 2, (ys[sr] + ys[er + 1]) / 2
            hw = min(text[0], (xs[sc + 1] - xs[sc]) / 2 - 4)
            hh = min(text[1], (ys[sr + 1] - ys[sr]) / 2 - 4)
            texts = (TextBox(k, rect_polygon(cx - hw, cy - hh, cx + hw, cy + hh)),)
        cells.append(CellAnnotation(sr, er, sc, ec, texts))

    return TableAnnotation(
        quad=QuadBox.from_box(Box(0.0, 0.0, float(width), float(height))),
        outline=((0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))),
        rows=rows,
        cols=cols,
        row_separators=tuple(((0.0, y), (float(width), y)) for y in ys[1:-1]),
        col_separators=tuple(((x, 0.0), (x, float(height))) for x in xs[1:-1]),
        cells=tuple(cells),
    )


@pytest.fixture
def grid_table():
    return make_grid_table
