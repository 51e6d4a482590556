import itertools

import numpy as np
import pytest
import zss
from hypothesis import given, settings, strategies as st

from tabparse.datagen import synthesize_page
from tabparse.detector import Detection
from tabparse.geometry import Box, QuadBox
from tabparse.merger import StructureCell, TableStructure, structure_from_annotation
from tabparse.metrics import (HORIZONTAL, VERTICAL, AdjacencyRelation, adjacency_prf, adjacency_relations,
                              evaluate_corpus, evaluate_page, evaluate_pairs, match_detections, optimal_match_count,
                              max_iou_per_proposal, prf, proposal_recall, quad_iou, quad_iou_matrix, struct_tree,
                              teds_struct, wavg_f1)
from tabparse.pipeline import PageResult, TableResult

from .conftest import SMALL_PAGE


def quad(x1, y1, x2, y2):
    return QuadBox.from_box(Box.from_xyxy(x1, y1, x2, y2))


def unit_grid(rows, cols, filled=None):
    cells = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            ids = (k,) if filled is None or filled[r][c] else ()
            cells.append(StructureCell(r, r, c, c, content_ids=ids))
    return TableStructure(rows, cols, cells)


def test_prf_conventions():
    assert prf(0, 0, 0) == (1.0, 1.0, 1.0)
    assert prf(0, 2, 0) == (0.0, 0.0, 0.0)
    assert prf(0, 0, 3) == (0.0, 0.0, 0.0)
    p, r, f = prf(1, 2, 1)
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)


@pytest.mark.parametrize("f1s,expected", [
    ((95.9, 95.6, 95.0, 91.5), 94.3),
    ((96.1, 96.0, 95.4, 92.9), 94.9),
])
def test_weighted_f1(f1s, expected):
    assert wavg_f1(f1s) == pytest.approx(expected, abs=0.05)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_weighted_f1_is_bounded(f1s):
    assert min(f1s) - 1e-12 <= wavg_f1(f1s) <= max(f1s) + 1e-12


def test_quad_iou():
    assert quad_iou(quad(0, 0, 10, 10), quad(0, 0, 10, 10)) == pytest.approx(1.0)
    assert quad_iou(quad(0, 0, 10, 10), quad(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert quad_iou(quad(0, 0, 10, 10), quad(20, 20, 30, 30)) == 0.0


def test_greedy_matching_can_miss_the_optimum():
    gts = [quad(0, 0, 100, 100), quad(0, 0, 100, 88)]
    preds = [quad(0, 0, 100, 95), quad(0, 0, 100, 100)]
    pairs = match_detections(preds, [0.9, 0.5], gts, 0.9)
    assert pairs == [(0, 0)]
    assert optimal_match_count(quad_iou_matrix(preds, gts), 0.9) == 2


def test_matching_is_one_to_one_in_score_order():
    gts = [quad(0, 0, 100, 100)]
    preds = [quad(0, 0, 100, 100), quad(1, 1, 100, 100)]
    assert match_detections(preds, [0.2, 0.8], gts, 0.5) == [(1, 0)]
    assert match_detections(preds, [0.2, 0.8], [], 0.5) == []


def test_proposal_recall():
    gt = np.array([[0, 0, 100, 100], [200, 200, 300, 300]], dtype=np.float64)
    props = np.array([[0, 0, 100, 100], [500, 500, 600, 600]], dtype=np.float64)
    assert proposal_recall(props, gt, 0.7) == 0.5
    assert proposal_recall(props, gt, 0.7, top_n=0) == 0.0
    assert proposal_recall(props, gt[:0], 0.7) == 1.0


def test_adjacency_of_a_full_grid():
    relations = adjacency_relations(unit_grid(2, 2))
    assert relations == {
        AdjacencyRelation(0, 1, HORIZONTAL), AdjacencyRelation(2, 3, HORIZONTAL),
        AdjacencyRelation(0, 2, VERTICAL), AdjacencyRelation(1, 3, VERTICAL),
    }


def test_adjacency_skips_empty_cells():
    relations = adjacency_relations(unit_grid(1, 3, [[True, False, True]]))
    assert relations == {AdjacencyRelation(0, 2, HORIZONTAL)}


def test_adjacency_of_a_spanning_cell():
    structure = TableStructure(2, 2, [
        StructureCell(0, 1, 0, 0, content_ids=(0,)),
        StructureCell(0, 0, 1, 1, content_ids=(1,)),
        StructureCell(1, 1, 1, 1, content_ids=(2,)),
    ])
    assert adjacency_relations(structure) == {
        AdjacencyRelation(0, 1, HORIZONTAL), AdjacencyRelation(0, 2, HORIZONTAL), AdjacencyRelation(1, 2, VERTICAL),
    }


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_adjacency_matches_pairwise_definition(rows, cols, data):
    filled = data.draw(st.lists(st.lists(st.booleans(), min_size=cols, max_size=cols), min_size=rows, max_size=rows))
    expected = set()
    for r in range(rows):
        for a, b in itertools.combinations(range(cols), 2):
            if filled[r][a] and filled[r][b] and not any(filled[r][a + 1:b]):
                expected.add(AdjacencyRelation(r * cols + a, r * cols + b, HORIZONTAL))
    for c in range(cols):
        for a, b in itertools.combinations(range(rows), 2):
            if filled[a][c] and filled[b][c] and not any(filled[k][c] for k in range(a + 1, b)):
                expected.add(AdjacencyRelation(a * cols + c, b * cols + c, VERTICAL))
    assert adjacency_relations(unit_grid(rows, cols, filled)) == expected


def test_adjacency_prf_compares_through_content():
    truth = unit_grid(2, 2)
    assert adjacency_prf(truth, truth).f1 == 1.0

    merged = TableStructure(2, 2, [
        StructureCell(0, 0, 0, 1, content_ids=(0, 1)),
        StructureCell(1, 1, 0, 0, content_ids=(2,)),
        StructureCell(1, 1, 1, 1, content_ids=(3,)),
    ])
    # 3 predicted relations, only the bottom row's survives the merge
    p, r, f = adjacency_prf(merged, truth)
    assert (p, r) == (pytest.approx(1 / 3), pytest.approx(1 / 4))


def test_teds_identical_and_colspan():
    two = unit_grid(1, 2)
    one = TableStructure(1, 2, [StructureCell(0, 0, 0, 1)])
    assert teds_struct(struct_tree(two), struct_tree(two)) == 1.0
    # one deletion and one relabel over four nodes
    assert teds_struct(struct_tree(one), struct_tree(two)) == pytest.approx(0.5)


def _zss(tree):
    label = tree.tag if tree.tag != "td" else f"td:{tree.rowspan}x{tree.colspan}"
    node = zss.Node(label)
    for child in tree.children:
        node.addkid(_zss(child))
    return node


def _random_structure(data, rows, cols):
    owner = -np.ones((rows, cols), dtype=int)
    cells = []
    for r in range(rows):
        for c in range(cols):
            if owner[r, c] >= 0:
                continue
            h = data.draw(st.integers(1, rows - r))
            w = data.draw(st.integers(1, cols - c))
            while (owner[r:r + h, c:c + w] >= 0).any():
                h, w = max(1, h - 1), max(1, w - 1)
            owner[r:r + h, c:c + w] = len(cells)
            cells.append(StructureCell(r, r + h - 1, c, c + w - 1))
    return TableStructure(rows, cols, cells)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_teds_agrees_with_zhang_shasha(data):
    a = struct_tree(_random_structure(data, data.draw(st.integers(1, 3)), data.draw(st.integers(1, 3))))
    b = struct_tree(_random_structure(data, data.draw(st.integers(1, 3)), data.draw(st.integers(1, 3))))
    distance = zss.simple_distance(_zss(a), _zss(b))
    assert teds_struct(a, b) == pytest.approx(1 - distance / max(a.size(), b.size()))
    assert teds_struct(a, b) == pytest.approx(teds_struct(b, a))


def _perfect(doc):
    tables = [TableResult(Detection(t.quad, 1.0), structure_from_annotation(t)) for t in doc.tables]
    return PageResult(doc.image, doc.width, doc.height, tables)


def test_perfect_predictions_score_one():
    docs = [synthesize_page(SMALL_PAGE, seed, image_id=f"{seed:04d}.png")[1] for seed in range(3)]
    report = evaluate_pairs([(_perfect(d), d) for d in docs])
    assert report.wavg_f1 == pytest.approx(1.0)
    assert report.adjacency_f1 == pytest.approx(1.0)
    assert report.teds_struct == pytest.approx(1.0)
    assert all(v.f1 == 1.0 for v in report.detection.values())
    assert len(report.pages) == 3


def test_missed_table_scores_zero_structure():
    _, doc = synthesize_page(SMALL_PAGE, 0, image_id="0000.png")
    evaluation = evaluate_page(PageResult(doc.image, doc.width, doc.height), doc)
    assert evaluation.counts[0.6] == (0, 0, len(doc.tables))
    assert evaluation.adjacency == [0.0] * len(doc.tables)
    assert evaluation.teds == [0.0] * len(doc.tables)


def test_empty_corpus_report():
    report = evaluate_corpus([])
    assert report.wavg_f1 == 1.0 and report.adjacency_f1 == 1.0 and report.pages == []


def test_best_overlap_per_proposal():
    gt = np.array([[0, 0, 100, 100]], dtype=np.float64)
    props = np.array([[0, 0, 100, 100], [0, 0, 50, 100], [300, 300, 400, 400]], dtype=np.float64)
    assert max_iou_per_proposal(props, gt) == pytest.approx([1.0, 0.5, 0.0])
    assert max_iou_per_proposal(props, gt[:0]).tolist() == [0.0, 0.0, 0.0]
