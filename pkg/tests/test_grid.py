import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import Polynomial

from tabparse.corpus import table_crop_sample
from tabparse.datagen import synthesize_page
from tabparse.grid import (Component, SeparatorLine, assemble_grid, binarize, border_lines, center_polyline,
                           estimate_thickness, extract_components, fit_center_line, intersect_grid, separator_lines,
                           upsample_masks, with_implicit_borders)
from tabparse.merger import apply_merges, oracle_scores, structure_from_annotation
from tabparse.splitter import SeparatorMasks, make_separator_gt, masks_from_gt

from .conftest import SMALL_PAGE


def bar(mask: np.ndarray) -> Component:
    ys, xs = np.nonzero(mask)
    return Component(ys, xs)


def straight(orientation, position, length, thickness=4.0):
    return SeparatorLine(orientation, Polynomial([position]), thickness, (0.0, float(length)))


def test_binarize_is_inclusive():
    assert binarize(np.full((3, 3), 0.9)).all()
    assert binarize(np.array([[0.8]]))[0, 0] == 1
    values = np.random.default_rng(0).uniform(size=(6, 7))
    assert np.array_equal(binarize(values, 0.5), (values >= 0.5).astype(np.uint8))


def test_components():
    mask = np.zeros((20, 30), np.uint8)
    assert extract_components(mask) == []
    mask[2:5, :] = 1
    assert len(extract_components(mask)) == 1
    mask[6:9, :] = 1
    assert len(extract_components(mask)) == 2

    diagonal = np.eye(6, dtype=np.uint8)
    assert len(extract_components(diagonal)) == 1
    speck = np.zeros((5, 5), np.uint8)
    speck[2, 2] = 1
    assert extract_components(speck) == []


def test_fit_horizontal_bar():
    mask = np.zeros((40, 100), np.uint8)
    mask[10:18] = 1
    line = fit_center_line(bar(mask), "row")
    assert line.evaluate(np.arange(100)) == pytest.approx(np.full(100, 13.5))
    assert line.thickness == 8.0
    assert line.extent == (0.0, 99.0)


def test_fit_sloped_bar_matches_least_squares():
    xs = np.arange(400)
    centre = 0.01 * xs + 9
    mask = np.zeros((20, 400), np.uint8)
    for x, c in zip(xs, centre):
        top = int(round(c - 3.5))
        mask[top:top + 8, x] = 1
    line = fit_center_line(bar(mask), "row")

    mids = np.array([np.nonzero(mask[:, x])[0].mean() for x in xs])
    want = np.polynomial.polynomial.polyfit(xs, mids, 3)
    assert line.coefficients() == pytest.approx(want, rel=1e-5, abs=1e-6)
    assert np.abs(line.evaluate(xs) - centre).max() < 0.75


def test_fit_curved_bar_residual():
    xs = np.arange(400)
    centre = 30 + 3 * np.sin(2 * np.pi * xs / 400)
    mask = np.zeros((60, 400), np.uint8)
    for x, c in zip(xs, centre):
        mask[int(round(c)) - 4:int(round(c)) + 4, x] = 1
    line = fit_center_line(bar(mask), "row")
    mids = np.array([np.nonzero(mask[:, x])[0].mean() for x in xs])
    assert np.abs(line.evaluate(xs) - mids).max() < line.thickness / 2


def test_fit_column_bar():
    mask = np.zeros((100, 40), np.uint8)
    mask[:, 20:26] = 1
    line = fit_center_line(bar(mask), "col")
    assert line.evaluate([0, 50, 99]) == pytest.approx([22.5] * 3)
    assert line.thickness == 6.0


def test_thickness_examples():
    mask = np.zeros((30, 64), np.uint8)
    mask[5:13] = 1
    assert estimate_thickness(bar(mask), "row") == 8.0

    mask[:] = 0
    for block in range(8):
        rows = 6 if block % 2 == 0 else 10
        mask[5:5 + rows, block * 8:(block + 1) * 8] = 1
    assert estimate_thickness(bar(mask), "row") == 8.0


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000))
def test_thickness_matches_column_counts(seed):
    rng = np.random.default_rng(seed)
    mask = (rng.uniform(size=(12, 40)) < 0.5).astype(np.uint8)
    mask[:, 0] = 1
    counts = mask.sum(axis=0)
    want = counts[(np.arange(40) % 8 == 0) & (counts > 0)].mean()
    assert estimate_thickness(bar(mask), "row") == pytest.approx(want)


def test_border_lines_offset_by_half_thickness():
    line = SeparatorLine("row", Polynomial([13.5]), 8.0, (0.0, 100.0))
    upper, lower = border_lines(line, 100)
    assert upper[:, 1] == pytest.approx(np.full(len(upper), 9.5))
    assert lower[:, 1] == pytest.approx(np.full(len(lower), 17.5))

    sloped = SeparatorLine("col", Polynomial([20.0, 0.1]), 6.0, (0.0, 100.0))
    left, right = border_lines(sloped, 100)
    assert right[:, 0] - left[:, 0] == pytest.approx(np.full(len(left), 6.0))
    assert left[:, 1] == pytest.approx(right[:, 1])


def test_short_separators_are_dropped():
    mask = np.zeros((60, 200), np.uint8)
    mask[10:16, :] = 1
    mask[40:46, 0:30] = 1
    lines = separator_lines(mask, "row")
    assert len(lines) == 1
    assert lines[0].mean_position() == pytest.approx(12.5)


def test_touching_separators_merge():
    mask = np.zeros((60, 200), np.uint8)
    mask[20:30, 0:100] = 1
    mask[20:30, 105:200] = 1
    assert len(separator_lines(mask, "row")) == 1

    mask[:] = 0
    mask[10:16, :] = 1
    mask[40:46, :] = 1
    assert len(separator_lines(mask, "row")) == 2


def test_implicit_borders():
    lines = with_implicit_borders([straight("row", 60.0, 240)], "row", (120, 240))
    assert [l.implicit for l in lines] == [True, False, True]
    assert [l.mean_position() for l in lines] == pytest.approx([0.0, 60.0, 120.0])

    edge = straight("row", 2.0, 240)
    assert len(with_implicit_borders([edge], "row", (120, 240))) == 2


def test_straight_grid_counts():
    rows = [straight("row", 60.0, 240)]
    cols = [straight("col", 80.0, 120), straight("col", 160.0, 120)]
    grid = intersect_grid(rows, cols, (120, 240))
    assert (grid.M, grid.N) == (2, 3)
    assert sum(len(r) for r in grid.cells) == 6
    assert grid.points.shape == (3, 4, 2)
    assert tuple(grid.points[1, 2]) == pytest.approx((160.0, 60.0))
    hull = grid.cell(0, 0).hull()
    assert (hull.x, hull.y, hull.x2, hull.y2) == pytest.approx((0.0, 0.0, 78.0, 58.0))


def test_curved_intersections_lie_on_both_lines():
    row = SeparatorLine("row", Polynomial([40.0, 0.05, -0.0002]), 6.0, (0.0, 240.0))
    col = SeparatorLine("col", Polynomial([100.0, 0.1]), 6.0, (0.0, 160.0))
    grid = intersect_grid([row], [col], (160, 240))
    x, y = grid.points[1, 1]
    assert abs(y - row.evaluate(x)) < 0.5
    assert abs(x - col.evaluate(y)) < 0.5


def test_upsample_masks_replicates_blocks():
    masks = SeparatorMasks(np.arange(6, dtype=np.float32).reshape(3, 2), np.ones((2, 12), np.float32))
    row, col = upsample_masks(masks, (3, 12))
    assert row.shape == (3, 12) and col.shape == (3, 12)
    assert np.array_equal(row[:, 8:], np.repeat([[1.0], [3.0], [5.0]], 4, axis=1))


def test_assemble_from_annotated_masks(grid_table):
    table = grid_table([40, 80, 120], [60, 120, 180, 240], 300, 160)
    gt = make_separator_gt(table, (160, 300))
    grid = assemble_grid(masks_from_gt(gt), (160, 300), threshold=0.5)
    assert (grid.M, grid.N) == (4, 5)
    for i, y in enumerate([40, 80, 120], start=1):
        assert np.abs(grid.points[i, 1:-1, 1] - y).max() <= 1.0
    for j, x in enumerate([60, 120, 180, 240], start=1):
        assert np.abs(grid.points[1:-1, j, 0] - x).max() <= 1.0


def test_blank_masks_give_border_only_grid():
    masks = SeparatorMasks(np.zeros((64, 12), np.float32), np.zeros((8, 96), np.float32))
    grid = assemble_grid(masks, (64, 96))
    assert (grid.M, grid.N) == (1, 1)
    assert all(l.implicit for l in grid.rows + grid.cols)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_tables_round_trip(seed):
    image, doc = synthesize_page(SMALL_PAGE, seed=seed)
    for table in doc.tables:
        sample = table_crop_sample(image, table, long_side=512)
        size = sample.crop.shape[:2]
        gt = make_separator_gt(sample.table, size)
        grid = assemble_grid(masks_from_gt(gt), size, threshold=0.5)
        assert (grid.M, grid.N) == (table.rows, table.cols)

        truth = structure_from_annotation(sample.table)
        merged = apply_merges(grid, oracle_scores(grid.M, grid.N, truth))
        assert sorted(c.span for c in merged.cells) == sorted(c.span for c in truth.cells)


def test_transposed_masks_give_transposed_grid(grid_table):
    table = grid_table([40, 80, 120], [64, 128, 192, 256], 304, 160)
    masks = masks_from_gt(make_separator_gt(table, (160, 304)))
    grid = assemble_grid(masks, (160, 304), threshold=0.5)

    flipped = SeparatorMasks(masks.col.T.copy(), masks.row.T.copy())
    transposed = assemble_grid(flipped, (304, 160), threshold=0.5)
    assert (transposed.M, transposed.N) == (grid.N, grid.M)
    np.testing.assert_allclose(transposed.points, grid.points.transpose(1, 0, 2)[..., ::-1], atol=0.5)


def _grid_count_rate(curve_prob, tables=100):
    config = dataclasses.replace(SMALL_PAGE, curve_prob=curve_prob)
    seen = exact = seed = 0
    while seen < tables:
        image, doc = synthesize_page(config, seed=seed)
        seed += 1
        for table in doc.tables[:tables - seen]:
            sample = table_crop_sample(image, table, long_side=512)
            size = sample.crop.shape[:2]
            grid = assemble_grid(masks_from_gt(make_separator_gt(sample.table, size)), size, threshold=0.5)
            seen += 1
            exact += (grid.M, grid.N) == (table.rows, table.cols)
    return exact / seen


@pytest.mark.slow
def test_straight_tables_always_round_trip():
    assert _grid_count_rate(curve_prob=0.0) == 1.0


@pytest.mark.slow
def test_curved_tables_round_trip():
    assert _grid_count_rate(curve_prob=1.0) >= 0.99
