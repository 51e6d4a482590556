"""Evaluation: IoU-thresholded detection P/R/F1, adjacency relations and TEDS-Struct."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
from apted import APTED, Config as TreeConfig
from apted.helpers import Tree
from loguru import logger
from scipy.optimize import linear_sum_assignment

from .annotation import DocAnnotation
from .geometry import QuadBox, iou_matrix
from .merger import TableStructure, structure_from_annotation

IOU_THRESHOLDS = (0.6, 0.7, 0.8, 0.9)
TSR_MATCH_IOU = 0.5
HORIZONTAL = "horizontal"
VERTICAL = "vertical"


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


def prf(matches: int, predicted: int, expected: int) -> PRF:
    if predicted == 0 and expected == 0:
        return PRF(1.0, 1.0, 1.0)
    p = matches / predicted if predicted else 0.0
    r = matches / expected if expected else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


# ---------------------------------------------------------------- detection

def quad_iou(a: QuadBox, b: QuadBox) -> float:
    pa, pb = a.polygon(), b.polygon()
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def quad_iou_matrix(preds: Sequence[QuadBox], gts: Sequence[QuadBox]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = quad_iou(p, g)
    return out


def match_detections(quads: Sequence[QuadBox], scores: Sequence[float], gts: Sequence[QuadBox],
                     iou_threshold: float) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching in descending score order."""
    ious = quad_iou_matrix(quads, gts)
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    for i in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"):
        if not len(gts):
            break
        candidates = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(candidates))
        if candidates[j] >= iou_threshold:
            taken[j] = True
            pairs.append((int(i), j))
    return pairs


def optimal_match_count(ious: np.ndarray, iou_threshold: float) -> int:
    if ious.size == 0:
        return 0
    eligible = (ious >= iou_threshold).astype(np.float64)
    rows, cols = linear_sum_assignment(-eligible)
    return int(eligible[rows, cols].sum())


def detection_prf(preds: Sequence, gts: Sequence[QuadBox], iou_threshold: float) -> PRF:
    """`preds` are detections (anything with .quad and .score)."""
    pairs = match_detections([p.quad for p in preds], [p.score for p in preds], gts, iou_threshold)
    return prf(len(pairs), len(preds), len(gts))


def wavg_f1(f1s: Sequence[float], thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    weights = np.asarray(thresholds, dtype=np.float64)
    return float(np.dot(weights, np.asarray(f1s, dtype=np.float64)) / weights.sum())


def max_iou_per_proposal(proposals_xyxy: np.ndarray, gt_xyxy: np.ndarray) -> np.ndarray:
    if len(proposals_xyxy) == 0 or len(gt_xyxy) == 0:
        return np.zeros(len(proposals_xyxy))
    return iou_matrix(np.asarray(proposals_xyxy), np.asarray(gt_xyxy)).max(axis=1)


def proposal_recall(proposals_xyxy: np.ndarray, gt_xyxy: np.ndarray, iou_threshold: float, top_n: int = 50) -> float:
    """Share of ground-truth boxes covered by one of the first `top_n` proposals."""
    if len(gt_xyxy) == 0:
        return 1.0
    top = np.asarray(proposals_xyxy)[:top_n]
    if len(top) == 0:
        return 0.0
    best = iou_matrix(np.asarray(gt_xyxy), top).max(axis=1)
    return float((best >= iou_threshold).mean())


# ---------------------------------------------------------------- adjacency relations

@dataclass(frozen=True)
class AdjacencyRelation:
    source: int
    target: int
    direction: str


def adjacency_relations(structure: TableStructure, nonempty: Optional[Sequence[bool]] = None) -> Set[AdjacencyRelation]:
    """Nearest non-empty neighbour to the right and below, scanning over blank grid elements.

    Cells are referred to by their index in `structure.cells`; emptiness defaults
    to "no content assigned".
    """
    if nonempty is None:
        nonempty = [bool(c.content_ids) for c in structure.cells]
    owner = structure.grid_owner()
    filled = np.zeros_like(owner, dtype=bool)
    for k, flag in enumerate(nonempty):
        filled[owner == k] = bool(flag)

    relations: Set[AdjacencyRelation] = set()
    for direction, grid, mask in ((HORIZONTAL, owner, filled), (VERTICAL, owner.T, filled.T)):
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                if not mask[r, c]:
                    continue
                source = int(grid[r, c])
                for nxt in range(c + 1, grid.shape[1]):
                    if grid[r, nxt] == source:
                        break
                    if mask[r, nxt]:
                        relations.add(AdjacencyRelation(source, int(grid[r, nxt]), direction))
                        break
    return relations


def _keyed(structure: TableStructure, relations: Iterable[AdjacencyRelation]) -> Set[Tuple[frozenset, frozenset, str]]:
    keys = [frozenset(c.content_ids) for c in structure.cells]
    return {(keys[r.source], keys[r.target], r.direction) for r in relations}


def adjacency_prf(pred: TableStructure, gt: TableStructure) -> PRF:
    """Relations compared through the content boxes of their cells."""
    ps = _keyed(pred, adjacency_relations(pred))
    gs = _keyed(gt, adjacency_relations(gt))
    return prf(len(ps & gs), len(ps), len(gs))


# ---------------------------------------------------------------- TEDS-Struct

class StructTree(Tree):
    def __init__(self, tag: str, rowspan: Optional[int] = None, colspan: Optional[int] = None, *children: "StructTree"):
        self.tag = tag
        self.rowspan = rowspan
        self.colspan = colspan
        self.children = list(children)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def bracket(self) -> str:
        label = self.tag if self.tag != "td" else f"td:{self.rowspan}x{self.colspan}"
        return "{" + label + "".join(c.bracket() for c in self.children) + "}"


class StructConfig(TreeConfig):
    def rename(self, node1: StructTree, node2: StructTree) -> float:
        same = (node1.tag, node1.rowspan, node1.colspan) == (node2.tag, node2.rowspan, node2.colspan)
        return 0.0 if same else 1.0


def struct_tree(structure: TableStructure) -> StructTree:
    rows = []
    for r in range(structure.rows):
        cells = sorted((c for c in structure.cells if c.start_row == r), key=lambda c: c.start_col)
        rows.append(StructTree("tr", None, None, *[StructTree("td", c.rowspan, c.colspan) for c in cells]))
    return StructTree("table", None, None, *rows)


def teds_struct(pred: StructTree, gt: StructTree) -> float:
    distance = APTED(pred, gt, StructConfig()).compute_edit_distance()
    return 1.0 - distance / max(pred.size(), gt.size())


# ---------------------------------------------------------------- page and corpus

@dataclass
class PageEvaluation:
    image: str
    counts: Dict[float, Tuple[int, int, int]]   # threshold -> (matches, predicted, expected)
    adjacency: List[float] = field(default_factory=list)
    teds: List[float] = field(default_factory=list)


@dataclass
class EvaluationReport:
    detection: Dict[float, PRF]
    wavg_f1: float
    adjacency_f1: float
    teds_struct: float
    pages: List[PageEvaluation]


def evaluate_page(pred, gt: DocAnnotation, thresholds: Sequence[float] = IOU_THRESHOLDS) -> PageEvaluation:
    """`pred` is a PageResult; GT tables without a matching prediction score 0 for structure."""
    gt_quads = [t.quad for t in gt.tables]
    quads = [t.detection.quad for t in pred.tables]
    scores = [t.detection.score for t in pred.tables]
    ious = quad_iou_matrix(quads, gt_quads)

    counts = {}
    for thr in thresholds:
        pairs = match_detections(quads, scores, gt_quads, thr)
        optimal = optimal_match_count(ious, thr)
        if optimal != len(pairs):
            logger.warning("{}: greedy matching found {} of {} optimal matches at IoU {}",
                           gt.image, len(pairs), optimal, thr)
        counts[float(thr)] = (len(pairs), len(quads), len(gt_quads))

    matched = dict((g, p) for p, g in match_detections(quads, scores, gt_quads, TSR_MATCH_IOU))
    evaluation = PageEvaluation(gt.image, counts)
    for g, table in enumerate(gt.tables):
        truth = structure_from_annotation(table)
        if g not in matched:
            evaluation.adjacency.append(0.0)
            evaluation.teds.append(0.0)
            continue
        structure = pred.tables[matched[g]].structure
        evaluation.adjacency.append(adjacency_prf(structure, truth).f1)
        evaluation.teds.append(teds_struct(struct_tree(structure), struct_tree(truth)))
    return evaluation


def evaluate_corpus(pages: Sequence[PageEvaluation], thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvaluationReport:
    detection = {}
    for thr in thresholds:
        totals = np.zeros(3, dtype=np.int64)
        for page in pages:
            totals += np.asarray(page.counts[float(thr)])
        detection[float(thr)] = prf(*(int(v) for v in totals))

    adjacency = [a for p in pages for a in p.adjacency]
    teds = [t for p in pages for t in p.teds]
    return EvaluationReport(
        detection=detection,
        wavg_f1=wavg_f1([detection[float(t)].f1 for t in thresholds], thresholds),
        adjacency_f1=float(np.mean(adjacency)) if adjacency else 1.0,
        teds_struct=float(np.mean(teds)) if teds else 1.0,
        pages=list(pages),
    )


def evaluate_pairs(pairs: Iterable[Tuple[object, DocAnnotation]],
                   thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvaluationReport:
    return evaluate_corpus([evaluate_page(p, g, thresholds) for p, g in pairs], thresholds)
