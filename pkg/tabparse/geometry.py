"""Axis-aligned and quadrilateral box algebra.

Boxes are (x, y, w, h) in pixels with (x, y) the top-left corner. Quads list
their corners clockwise on screen (y grows downwards) starting at top-left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch
from shapely.geometry import Polygon

from .errors import GeometryError

Point = Tuple[float, float]


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError("Box needs a positive width and height.",
                                [{"field": "box", "reason": f"w={self.w},h={self.h}"}])

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    def union(self, other: "Box") -> "Box":
        return Box.from_xyxy(min(self.x, other.x), min(self.y, other.y),
                             max(self.x2, other.x2), max(self.y2, other.y2))

    def intersection_area(self, other: "Box") -> float:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0.0
        return iw * ih

    def scaled(self, sx: float, sy: float | None = None) -> "Box":
        sy = sx if sy is None else sy
        return Box(self.x * sx, self.y * sy, self.w * sx, self.h * sy)

    def corners(self) -> List[Point]:
        return [(self.x, self.y), (self.x2, self.y), (self.x2, self.y2), (self.x, self.y2)]


def _signed_area(points: Sequence[Point]) -> float:
    s = 0.0
    for (x1, y1), (x2, y2) in zip(points, list(points[1:]) + [points[0]]):
        s += x1 * y2 - x2 * y1
    return 0.5 * s


@dataclass(frozen=True)
class QuadBox:
    points: Tuple[Point, Point, Point, Point]

    def __post_init__(self):
        if len(self.points) != 4:
            raise GeometryError("A quad needs exactly four corners.")
        if _signed_area(self.points) <= 0:
            raise GeometryError("Quad corners must run clockwise from top-left.",
                                [{"field": "quad", "reason": "non_positive_area"}])
        if not Polygon(self.points).is_valid:
            raise GeometryError("Quad must be a simple polygon.",
                                [{"field": "quad", "reason": "self_intersecting"}])

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "QuadBox":
        v = [float(a) for a in values]
        return cls(((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7])))

    @classmethod
    def from_box(cls, box: Box) -> "QuadBox":
        tl, tr, br, bl = box.corners()
        return cls((tl, tr, br, bl))

    @classmethod
    def try_from_points(cls, points: Iterable[Point]) -> "QuadBox | None":
        try:
            return cls(tuple((float(x), float(y)) for x, y in points))
        except GeometryError:
            return None

    def flat(self) -> List[float]:
        return [c for p in self.points for c in p]

    def hull(self) -> Box:
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return Box.from_xyxy(min(xs), min(ys), max(xs), max(ys))

    @property
    def area(self) -> float:
        return _signed_area(self.points)

    def polygon(self) -> Polygon:
        return Polygon(self.points)

    def centroid(self) -> Point:
        c = self.polygon().centroid
        return (c.x, c.y)

    def transformed(self, fn) -> "QuadBox":
        return QuadBox(tuple(fn(p) for p in self.points))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError("Score must lie in [0, 1].",
                                [{"field": "score", "reason": str(self.score)}])


def iou(a: Box, b: Box) -> float:
    inter = a.intersection_area(b)
    if inter <= 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy arrays (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms_xyxy(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy NMS; equal scores resolve to the lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        return []

    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.lexsort((np.arange(len(scores)), -scores))

    keep: List[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return keep


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> List[int]:
    if not 0.0 < iou_threshold < 1.0:
        raise GeometryError("NMS threshold must lie in (0, 1).")
    if not boxes:
        return []
    xyxy = np.array([b.box.to_xyxy() for b in boxes])
    scores = np.array([b.score for b in boxes])
    return nms_xyxy(xyxy, scores, iou_threshold)


def box_delta(bi: Box, bj: Box) -> Tuple[float, float, float, float, float, float]:
    return (
        (bi.x - bj.x) / bi.w,
        (bi.y - bj.y) / bi.h,
        math.log(bi.w / bj.w),
        math.log(bi.h / bj.h),
        (bj.x - bi.x) / bj.w,
        (bj.y - bi.y) / bj.h,
    )


def spatial_compat_feature(bi: Box, bj: Box) -> List[float]:
    bij = bi.union(bj)
    return [*box_delta(bi, bj), *box_delta(bi, bij), *box_delta(bj, bij)]


def box_delta_tensor(bi: torch.Tensor, bj: torch.Tensor) -> torch.Tensor:
    """Batched box_delta over (..., 4) xywh tensors."""
    xi, yi, wi, hi = bi.unbind(-1)
    xj, yj, wj, hj = bj.unbind(-1)
    return torch.stack([
        (xi - xj) / wi,
        (yi - yj) / hi,
        torch.log(wi / wj),
        torch.log(hi / hj),
        (xj - xi) / wj,
        (yj - yi) / hj,
    ], dim=-1)


def spatial_compat_tensor(bi: torch.Tensor, bj: torch.Tensor) -> torch.Tensor:
    x1 = torch.minimum(bi[..., 0], bj[..., 0])
    y1 = torch.minimum(bi[..., 1], bj[..., 1])
    x2 = torch.maximum(bi[..., 0] + bi[..., 2], bj[..., 0] + bj[..., 2])
    y2 = torch.maximum(bi[..., 1] + bi[..., 3], bj[..., 1] + bj[..., 3])
    bij = torch.stack([x1, y1, x2 - x1, y2 - y1], dim=-1)
    return torch.cat([box_delta_tensor(bi, bj), box_delta_tensor(bi, bij), box_delta_tensor(bj, bij)], dim=-1)


def boxes_to_xyxy(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.to_xyxy() for b in boxes], dtype=np.float64)


def interp_polyline(points: Sequence[Point], at, axis: int = 0) -> np.ndarray:
    """Evaluate a polyline that is single-valued along `axis` (0: y as a function of x)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    other = 1 - axis
    return np.interp(np.asarray(at, dtype=np.float64), pts[:, axis], pts[:, other])


def resample_polyline(points: Sequence[Point], step: float = 4.0) -> np.ndarray:
    """Points every `step` pixels of arc length; both end points kept."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return pts.copy()
    seg = np.hypot(*np.diff(pts, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        return pts[:1].copy()
    n = max(int(math.ceil(arc[-1] / step)), 1)
    s = np.linspace(0.0, arc[-1], n + 1)
    return np.stack([np.interp(s, arc, pts[:, 0]), np.interp(s, arc, pts[:, 1])], axis=1)


def densify_polygon(points: Sequence[Point], step: float = 1.0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    closed = np.concatenate([pts, pts[:1]], axis=0)
    return resample_polyline(closed, step)[:-1]


def points_hull(points: np.ndarray) -> Box:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return Box.from_xyxy(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
