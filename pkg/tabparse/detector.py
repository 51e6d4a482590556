"""Corner-proposal table detector.

Corner heads on the shared Dilated-C5 map propose tables from every valid
top-left / bottom-right pair; a Fast R-CNN head scores each proposal and
regresses a quadrilateral.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from .backbone import DetectorBackbone
from .config import Config, ModelConfig
from .geometry import Box, QuadBox, iou_matrix, nms_xyxy
from .imaging import image_to_tensor, pad_to_multiple, resize_for_detection
from .ops import CornerPool, evaluating, normal_init, roi_align_boxes

KINDS = ("top_left", "bottom_right")
LAMBDA_CORNER = 0.2
HEAT_PRIOR_BIAS = -2.19
# sub-pixel offsets stay inside their cell: [0, MAX_OFFSET]
MAX_OFFSET = 0.999


@dataclass(frozen=True)
class CornerPoint:
    kind: str
    x: float
    y: float
    score: float


@dataclass
class CornerTargets:
    heatmap: np.ndarray   # (H, W) penalty-reduced targets, 1 at positives
    offsets: np.ndarray   # (2, H, W), only meaningful under `mask`
    mask: np.ndarray      # (H, W) bool


@dataclass(frozen=True)
class TableProposal:
    box: Box
    score: float


@dataclass(frozen=True)
class Detection:
    quad: QuadBox
    score: float


class CornerHead(nn.Module):
    def __init__(self, channels: int = 64):
        super().__init__()
        self.pre = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True))
        self.pools = nn.ModuleDict({k: CornerPool(channels, k) for k in KINDS})
        self.heat = nn.ModuleDict({k: self._branch(channels, 1) for k in KINDS})
        self.offset = nn.ModuleDict({k: self._branch(channels, 2) for k in KINDS})

        normal_init([self.pre, self.heat, self.offset])
        for k in KINDS:
            nn.init.constant_(self.heat[k][-1].bias, HEAT_PRIOR_BIAS)

    @staticmethod
    def _branch(channels: int, out: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, out, 1),
        )

    def forward(self, c5: torch.Tensor) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        x = self.pre(c5)
        outputs = {}
        for k in KINDS:
            pooled = self.pools[k](x)
            outputs[k] = (torch.sigmoid(self.heat[k](pooled)), self.offset[k](pooled))
        return outputs


class FastRCNNHead(nn.Module):
    def __init__(self, channels: int = 64, hidden: int = 1024, pool: int = 7):
        super().__init__()
        self.pool = pool
        self.fc = nn.Sequential(
            nn.Linear(channels * pool * pool, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
        )
        self.cls = nn.Linear(hidden, 1)
        self.reg = nn.Linear(hidden, 8)
        normal_init([self.fc, self.cls])
        normal_init([self.reg], std=0.001)

    def forward(self, c5: torch.Tensor, rois: torch.Tensor, stride: float) -> Tuple[torch.Tensor, torch.Tensor]:
        """rois: (K, 5) [batch_id, x1, y1, x2, y2] in input-image pixels."""
        feats = roi_align_boxes(c5, rois, stride, self.pool).flatten(1)
        hidden = self.fc(feats)
        return torch.sigmoid(self.cls(hidden)).squeeze(1), self.reg(hidden)


class TableDetector(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.backbone = DetectorBackbone(config.backbone, config.channels)
        self.head = CornerHead(config.channels)
        self.frcn = FastRCNNHead(config.channels, config.frcn_dim)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, images: torch.Tensor):
        c5 = self.backbone(images)
        return c5, self.head(c5)

    def detect(self, image: np.ndarray) -> List[Detection]:
        return detect_tables(self, image)


# ---------------------------------------------------------------- targets

def gaussian_radius(height: float, width: float, min_overlap: float = 0.3) -> float:
    """Largest corner displacement that keeps IoU >= min_overlap with the box."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * c1)) / 2

    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 ** 2 - 16 * c2)) / 8

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def _draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    h, w = heatmap.shape
    if radius <= 0:
        heatmap[cy, cx] = 1.0
        return
    sigma = radius / 3.0
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    gaussian = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))

    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = gaussian[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def make_corner_targets(gt_boxes: Sequence[Box], map_shape: Tuple[int, int], stride: float) -> Dict[str, CornerTargets]:
    h, w = map_shape
    targets = {k: CornerTargets(np.zeros((h, w), np.float32), np.zeros((2, h, w), np.float32),
                                np.zeros((h, w), bool)) for k in KINDS}

    for box in gt_boxes:
        radius = max(0, int(gaussian_radius(box.h / stride, box.w / stride)))
        corners = {"top_left": (box.x, box.y), "bottom_right": (box.x2, box.y2)}
        for kind, (qx, qy) in corners.items():
            fx, fy = qx / stride, qy / stride
            px = int(min(max(math.floor(fx), 0), w - 1))
            py = int(min(max(math.floor(fy), 0), h - 1))
            t = targets[kind]
            _draw_gaussian(t.heatmap, px, py, radius)
            t.heatmap[py, px] = 1.0
            t.mask[py, px] = True
            t.offsets[0, py, px] = min(max(fx - px, 0.0), MAX_OFFSET)
            t.offsets[1, py, px] = min(max(fy - py, 0.0), MAX_OFFSET)
    return targets


def stack_targets(per_image: Sequence[Dict[str, CornerTargets]], device=None) -> Dict[str, Dict[str, torch.Tensor]]:
    out = {}
    for k in KINDS:
        out[k] = {
            "heatmap": torch.as_tensor(np.stack([t[k].heatmap for t in per_image])[:, None], device=device),
            "offsets": torch.as_tensor(np.stack([t[k].offsets for t in per_image]), device=device),
            "mask": torch.as_tensor(np.stack([t[k].mask for t in per_image])[:, None], device=device),
        }
    return out


# ---------------------------------------------------------------- decoding

def decode_corners(heatmap, offsets, stride: float, top_k: int = 100,
                   score_threshold: float = 0.3, kind: str = "top_left") -> List[CornerPoint]:
    heat = torch.as_tensor(heatmap).detach().cpu().to(torch.float64).reshape(1, 1, *np.shape(heatmap)[-2:])
    off = torch.as_tensor(offsets).detach().cpu().to(torch.float64).reshape(2, *heat.shape[-2:]).numpy()
    hmax = F.max_pool2d(heat, 3, stride=1, padding=1)
    peaks = (heat == hmax)[0, 0].numpy()

    scores = heat[0, 0].numpy()
    width = scores.shape[1]
    idx = np.flatnonzero(peaks)
    flat = scores.reshape(-1)[idx]
    order = np.lexsort((idx, -flat))[:top_k]

    corners = []
    for i in idx[order]:
        score = float(scores.reshape(-1)[i])
        if score < score_threshold:
            continue
        py, px = divmod(int(i), width)
        corners.append(CornerPoint(kind, (px + off[0, py, px]) * stride, (py + off[1, py, px]) * stride, score))
    return corners


def enumerate_proposals(tl: Sequence[CornerPoint], br: Sequence[CornerPoint],
                        nms_threshold: float = 0.7) -> List[TableProposal]:
    boxes, scores = [], []
    for a in tl:
        for b in br:
            if a.x < b.x and a.y < b.y:
                boxes.append((a.x, a.y, b.x, b.y))
                scores.append((a.score + b.score) / 2.0)
    if not boxes:
        return []
    keep = nms_xyxy(np.array(boxes), np.array(scores), nms_threshold)
    return [TableProposal(Box.from_xyxy(*boxes[i]), float(scores[i])) for i in keep]


def proposal_corners(xyxy: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = xyxy.unbind(-1)
    return torch.stack([x1, y1, x2, y1, x2, y2, x1, y2], dim=-1)


def encode_quad_offsets(proposals_xyxy: torch.Tensor, quads: torch.Tensor) -> torch.Tensor:
    w = (proposals_xyxy[:, 2] - proposals_xyxy[:, 0])[:, None]
    h = (proposals_xyxy[:, 3] - proposals_xyxy[:, 1])[:, None]
    scale = torch.cat([w, h] * 4, dim=1)
    return (quads - proposal_corners(proposals_xyxy)) / scale


def decode_quad_offsets(proposals_xyxy: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    w = (proposals_xyxy[:, 2] - proposals_xyxy[:, 0])[:, None]
    h = (proposals_xyxy[:, 3] - proposals_xyxy[:, 1])[:, None]
    scale = torch.cat([w, h] * 4, dim=1)
    return proposal_corners(proposals_xyxy) + offsets * scale


# ---------------------------------------------------------------- training samples

def assign_proposal_labels(proposals_xyxy: np.ndarray, gt_xyxy: np.ndarray,
                           pos_iou: float = 0.7, neg_iou: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Return (labels, matched gt index): 1 positive, 0 negative, -1 ignored."""
    n = len(proposals_xyxy)
    if len(gt_xyxy) == 0:
        return np.zeros(n, np.int64), np.full(n, -1, np.int64)
    ious = iou_matrix(proposals_xyxy, gt_xyxy)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels = np.full(n, -1, np.int64)
    labels[best > pos_iou] = 1
    labels[best < neg_iou] = 0
    return labels, matched


def jitter_boxes(gt_xyxy: np.ndarray, rng: np.random.Generator, count: int, ratio: float = 0.1) -> np.ndarray:
    if len(gt_xyxy) == 0:
        return np.zeros((0, 4))
    out = []
    for x1, y1, x2, y2 in gt_xyxy:
        w, h = x2 - x1, y2 - y1
        noise = rng.uniform(-ratio, ratio, size=(count, 4)) * np.array([w, h, w, h])
        boxes = np.array([x1, y1, x2, y2]) + noise
        out.append(boxes[(boxes[:, 2] > boxes[:, 0] + 1) & (boxes[:, 3] > boxes[:, 1] + 1)])
    return np.concatenate(out, axis=0)


def random_boxes(rng: np.random.Generator, count: int, width: int, height: int, min_size: float = 16.0) -> np.ndarray:
    if count <= 0:
        return np.zeros((0, 4))
    xs = np.sort(rng.uniform(0, width, size=(count, 2)), axis=1)
    ys = np.sort(rng.uniform(0, height, size=(count, 2)), axis=1)
    xs[:, 1] = np.maximum(xs[:, 1], xs[:, 0] + min_size)
    ys[:, 1] = np.maximum(ys[:, 1], ys[:, 0] + min_size)
    return np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)


def ohem_select(losses: np.ndarray, labels: np.ndarray, num_pos: int, num_neg: int) -> np.ndarray:
    """Hardest positives and negatives by loss; ignored samples (-1) are never chosen."""
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels)
    picked = []
    for value, quota in ((1, num_pos), (0, num_neg)):
        idx = np.flatnonzero(labels == value)
        order = np.argsort(-losses[idx], kind="stable")[:quota]
        picked.append(idx[order])
    return np.concatenate(picked).astype(np.int64)


# ---------------------------------------------------------------- losses

def focal_term(heat: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Unnormalized penalty-reduced focal loss summed over all pixels."""
    p = heat.clamp(1e-4, 1 - 1e-4)
    pos = target.eq(1).to(p.dtype)
    neg = 1.0 - pos
    pos_loss = -torch.log(p) * (1 - p) ** alpha * pos
    neg_loss = -torch.log(1 - p) * p ** alpha * (1 - target) ** beta * neg
    return pos_loss.sum() + neg_loss.sum()


def corner_loss(outputs: Dict[str, Tuple[torch.Tensor, torch.Tensor]],
                targets: Dict[str, Dict[str, torch.Tensor]], num_tables: int) -> torch.Tensor:
    any_heat = outputs[KINDS[0]][0]
    focal = any_heat.new_zeros(())
    offset = any_heat.new_zeros(())
    num_corners = 0
    for k in KINDS:
        heat, off = outputs[k]
        t = targets[k]
        focal = focal + focal_term(heat, t["heatmap"].to(heat.dtype))
        mask = t["mask"].expand_as(off)
        num_corners += int(t["mask"].sum())
        if mask.any():
            offset = offset + F.smooth_l1_loss(off[mask], t["offsets"].to(off.dtype)[mask], reduction="sum")

    loss = any_heat.new_zeros(())
    if num_tables > 0:
        loss = loss + focal / num_tables
    if num_corners > 0:
        loss = loss + offset / num_corners
    return loss


def frcn_loss(scores: torch.Tensor, labels: torch.Tensor, offsets: torch.Tensor,
              quad_targets: torch.Tensor) -> torch.Tensor:
    if scores.numel() == 0:
        return scores.new_zeros(())
    labels = labels.to(scores.dtype)
    cls = F.binary_cross_entropy(scores.clamp(1e-7, 1 - 1e-7), labels, reduction="mean")
    fg = labels > 0.5
    n_fg = int(fg.sum())
    if n_fg == 0:
        return cls
    reg = F.l1_loss(offsets[fg], quad_targets[fg], reduction="sum") / n_fg
    return cls + reg


def detector_loss(l_corner: torch.Tensor, l_frcn: torch.Tensor) -> torch.Tensor:
    return LAMBDA_CORNER * l_corner + l_frcn


# ---------------------------------------------------------------- inference

def _sanitize(quad_flat: np.ndarray, proposal: np.ndarray, width: float, height: float) -> Optional[QuadBox]:
    pts = np.asarray(quad_flat, dtype=np.float64).reshape(4, 2)
    pts[:, 0] = np.clip(pts[:, 0], 0, width)
    pts[:, 1] = np.clip(pts[:, 1], 0, height)
    quad = QuadBox.try_from_points(pts.tolist())
    if quad is not None:
        return quad
    x1, y1, x2, y2 = proposal
    x1, x2 = np.clip([x1, x2], 0, width)
    y1, y2 = np.clip([y1, y2], 0, height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return QuadBox.from_box(Box.from_xyxy(x1, y1, x2, y2))


def proposals_from_outputs(outputs, stride: float, index: int = 0, top_k: int = Config.DET_TOP_K,
                           threshold: float = Config.DET_CORNER_THRESHOLD,
                           nms_threshold: float = Config.DET_PROPOSAL_NMS) -> List[TableProposal]:
    corners = {}
    for k in KINDS:
        heat, off = outputs[k]
        corners[k] = decode_corners(heat[index, 0], off[index], stride, top_k, threshold, kind=k)
    return enumerate_proposals(corners["top_left"], corners["bottom_right"], nms_threshold)


@torch.no_grad()
def detect_tables(model: TableDetector, image: np.ndarray, settings=Config) -> List[Detection]:
    with evaluating(model):
        return _detect(model, image, settings)


def _detect(model: TableDetector, image: np.ndarray, settings) -> List[Detection]:
    h, w = image.shape[:2]
    resized, scale = resize_for_detection(image, settings.DET_SHORT_SIDE, settings.DET_LONG_SIDE_MAX)
    device = next(model.parameters()).device

    x = image_to_tensor(pad_to_multiple(resized, 32)).unsqueeze(0).to(device)
    c5, outputs = model(x)
    proposals = proposals_from_outputs(outputs, model.stride, 0, settings.DET_TOP_K,
                                       settings.DET_CORNER_THRESHOLD, settings.DET_PROPOSAL_NMS)
    if not proposals:
        return []

    xyxy = torch.tensor([p.box.to_xyxy() for p in proposals], dtype=c5.dtype, device=device)
    rois = torch.cat([xyxy.new_zeros((len(proposals), 1)), xyxy], dim=1)
    scores, offsets = model.frcn(c5, rois, model.stride)
    quads = decode_quad_offsets(xyxy, offsets)

    scores = scores.cpu().numpy()
    quads = quads.cpu().numpy() / scale
    boxes = xyxy.cpu().numpy() / scale

    candidates = []
    for i in np.flatnonzero(scores >= settings.DET_SCORE_THRESHOLD):
        quad = _sanitize(quads[i], boxes[i], w, h)
        if quad is None:
            logger.debug("dropping detection outside the page")
            continue
        candidates.append(Detection(quad, float(scores[i])))
    if not candidates:
        return []

    hulls = np.array([d.quad.hull().to_xyxy() for d in candidates])
    keep = nms_xyxy(hulls, np.array([d.score for d in candidates]), settings.DET_FINAL_NMS)
    return [candidates[i] for i in keep]
