"""SGD training loops for the table detector and the structure recognizer.

Batches are built by a torch DataLoader over iteration indices; every sample
draws from its own generator seeded with (seed, iteration, slot), so the loss
trace does not depend on the number of loader workers.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from shapely.geometry import Polygon
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .annotation import CellAnnotation, TableAnnotation
from .checkpoints import save_checkpoint
from .config import Config, TrainConfig
from .corpus import Corpus, page_sample, random_rotation, rotate_page, table_crop_sample
from .detector import (TableDetector, assign_proposal_labels, corner_loss, detector_loss, encode_quad_offsets,
                       frcn_loss, jitter_boxes, make_corner_targets, ohem_select, proposals_from_outputs,
                       random_boxes, stack_targets)
from .errors import TrainingDivergedError, ValidationError
from .geometry import Box
from .grid import assemble_grid
from .imaging import batch_tensor
from .merger import gt_cell_polygons, label_pairs, merge_loss
from .metrics import proposal_recall
from .recognizer import TableRecognizer, recognizer_loss
from .splitter import (SeparatorGT, SplitSamples, make_separator_gt, masks_from_prediction, sample_split_pixels,
                       split_loss)

TRACE = "trace.csv"


@dataclass
class TrainResult:
    checkpoint: str
    checkpoint_id: str
    trace_path: str
    trace: pd.DataFrame


@dataclass
class DetectorSample:
    image: np.ndarray
    boxes: List[Box]
    quads: np.ndarray        # (G, 8) page-scaled GT quads
    extra: np.ndarray        # (K, 4) jittered GT and random boxes


@dataclass
class TableCropSample:
    crop: np.ndarray
    table: TableAnnotation
    separators: SeparatorGT
    pixels: SplitSamples
    cells: List[Tuple[CellAnnotation, Polygon]]


def sample_rng(seed: int, iteration: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, slot])


def _as_batch(batch):
    return batch


class _StepDataset(Dataset):
    """Item `it` is the list of samples for training iteration `it`."""

    def __init__(self, config: TrainConfig, build: Callable[[np.random.Generator], object]):
        self.config = config
        self.build = build

    def __len__(self) -> int:
        return self.config.iterations

    def __getitem__(self, iteration: int) -> list:
        return [self.build(sample_rng(self.config.seed, iteration, slot))
                for slot in range(self.config.images_per_step)]


def _loader(dataset: Dataset, workers: int) -> DataLoader:
    return DataLoader(dataset, batch_size=None, shuffle=False, num_workers=workers, collate_fn=_as_batch)


class DetectorSamples(_StepDataset):
    def __init__(self, corpus: Corpus, config: TrainConfig):
        if len(corpus) == 0:
            raise ValidationError("Corpus has no pages.", [{"field": "corpus", "reason": "empty"}])
        self.corpus = corpus
        super().__init__(config, self.sample)

    def sample(self, rng: np.random.Generator) -> DetectorSample:
        c = self.config
        image, doc = self.corpus[int(rng.integers(len(self.corpus)))]
        if c.rotate:
            image, doc = rotate_page(image, doc, random_rotation(rng, c.rotations, c.rotation_jitter))
        image, doc, _ = page_sample(image, doc, int(rng.choice(np.asarray(c.scales))))

        boxes = [t.quad.hull() for t in doc.tables]
        gt_xyxy = np.array([b.to_xyxy() for b in boxes]).reshape(-1, 4)
        h, w = image.shape[:2]
        extra = np.concatenate([
            jitter_boxes(gt_xyxy, rng, c.jitter_per_gt, c.jitter_ratio),
            random_boxes(rng, c.random_proposals, w, h),
        ]).reshape(-1, 4)
        quads = np.array([t.quad.flat() for t in doc.tables], dtype=np.float64).reshape(-1, 8)
        return DetectorSample(image, boxes, quads, extra)


class TableSamples(_StepDataset):
    def __init__(self, corpus: Corpus, config: TrainConfig):
        self.corpus = corpus
        self.tables = corpus.tables()
        if not self.tables:
            raise ValidationError("Corpus has no tables.", [{"field": "corpus", "reason": "no_tables"}])
        super().__init__(config, self.sample)

    def sample(self, rng: np.random.Generator) -> TableCropSample:
        page, index = self.tables[int(rng.integers(len(self.tables)))]
        image, doc = self.corpus[page]
        s = table_crop_sample(image, doc.tables[index], int(rng.choice(np.asarray(self.config.tsr_scales))))
        size = s.crop.shape[:2]
        separators = make_separator_gt(s.table, size)
        return TableCropSample(
            crop=s.crop,
            table=s.table,
            separators=separators,
            pixels=sample_split_pixels(separators, self.config.split_pixels, rng),
            cells=gt_cell_polygons(s.table, size),
        )


# ---------------------------------------------------------------- optimization

def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate(0), momentum=config.momentum,
                           weight_decay=config.weight_decay)


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def detector_step(model: TableDetector, batch: Sequence[DetectorSample], config: TrainConfig,
                  device: str) -> Dict[str, torch.Tensor]:
    x = batch_tensor([s.image for s in batch]).to(device)
    c5, outputs = model(x)
    targets = stack_targets([make_corner_targets(s.boxes, tuple(c5.shape[-2:]), model.stride) for s in batch], device)
    l_corner = corner_loss(outputs, targets, sum(len(s.boxes) for s in batch))

    rois, labels, quad_targets, recall_07, recall_09 = [], [], [], [], []
    for b, s in enumerate(batch):
        gt_xyxy = np.array([box.to_xyxy() for box in s.boxes]).reshape(-1, 4)
        predicted = np.array([p.box.to_xyxy() for p in proposals_from_outputs(outputs, model.stride, b)]).reshape(-1, 4)
        recall_07.append(proposal_recall(predicted, gt_xyxy, 0.7))
        recall_09.append(proposal_recall(predicted, gt_xyxy, 0.9))

        props = np.concatenate([predicted, s.extra])[:config.max_proposals]
        lab, matched = assign_proposal_labels(props, gt_xyxy)
        props_t = torch.as_tensor(props, dtype=c5.dtype, device=device)
        target = torch.zeros((len(props), 8), dtype=c5.dtype, device=device)
        fg = np.flatnonzero(lab == 1)
        if len(fg):
            gt_quads = torch.as_tensor(s.quads[matched[fg]], dtype=c5.dtype, device=device)
            fg_t = torch.as_tensor(fg, device=device)
            target[fg_t] = encode_quad_offsets(props_t[fg_t], gt_quads)
        rois.append(torch.cat([props_t.new_full((len(props), 1), float(b)), props_t], dim=1))
        labels.append(lab)
        quad_targets.append(target)

    all_rois = torch.cat(rois)
    all_labels = np.concatenate(labels)
    scores, offsets = model.frcn(c5, all_rois, model.stride)

    with torch.no_grad():
        per_roi = F.binary_cross_entropy(scores.clamp(1e-7, 1 - 1e-7),
                                         torch.as_tensor(np.clip(all_labels, 0, 1), dtype=scores.dtype, device=device),
                                         reduction="none").cpu().numpy()
    picked, start = [], 0
    for lab in labels:
        stop = start + len(lab)
        picked.append(start + ohem_select(per_roi[start:stop], lab, config.ohem_proposals_pos,
                                          config.ohem_proposals_neg))
        start = stop
    picked_t = torch.as_tensor(np.concatenate(picked), dtype=torch.long, device=device)

    l_frcn = frcn_loss(scores[picked_t], torch.as_tensor(all_labels, device=device)[picked_t],
                       offsets[picked_t], torch.cat(quad_targets)[picked_t])
    return {
        "loss": detector_loss(l_corner, l_frcn),
        "corner_loss": l_corner,
        "frcn_loss": l_frcn,
        "recall_at_07": float(np.mean(recall_07)),
        "recall_at_09": float(np.mean(recall_09)),
    }


def tsr_step(model: TableRecognizer, batch: Sequence[TableCropSample], config: TrainConfig,
             device: str) -> Dict[str, torch.Tensor]:
    x = batch_tensor([s.crop for s in batch]).to(device)
    p2, row, col = model(x)
    l_split = split_loss(row, col, [s.separators for s in batch], [s.pixels for s in batch])

    scores, labels, skipped = [], [], 0
    for b, s in enumerate(batch):
        size = s.crop.shape[:2]
        grid = assemble_grid(masks_from_prediction(row, col, size, b), size, Config.SEPARATOR_THRESHOLD)
        if grid.M < 2 or grid.N < 2:
            skipped += 1
            continue
        directed = model.merger(p2, grid, model.stride, b)
        scores.append(directed.reshape(-1))
        # both directed scores of a pair share its label
        labels.append(torch.as_tensor(label_pairs(grid, s.cells), device=device).repeat_interleave(2))
    if skipped:
        logger.debug("merge loss skipped for {} of {} tables without a 2x2 grid", skipped, len(batch))

    if scores:
        l_merge = merge_loss(torch.cat(scores), torch.cat(labels), config.ohem_pairs_pos, config.ohem_pairs_neg)
    else:
        l_merge = p2.new_zeros(())
    return {
        "loss": recognizer_loss(l_split, l_merge),
        "split_loss": l_split,
        "merge_loss": l_merge,
        "merge_skipped": float(skipped),
    }


def _fit(model: nn.Module, kind: str, dataset: Dataset, step: Callable, config: TrainConfig,
         out_dir: str, device: str) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    model.to(device)
    optimizer = make_optimizer(model, config)
    model_config = config.model_config()

    rows = []
    progress = tqdm(_loader(dataset, config.loader_workers), total=config.iterations, desc=f"train {kind}", leave=False)
    for iteration, batch in enumerate(progress):
        lr = config.learning_rate(iteration)
        set_learning_rate(optimizer, lr)
        model.train()

        terms = step(model, batch, config, device)
        loss = terms["loss"]
        if not bool(torch.isfinite(loss)):
            raise TrainingDivergedError(
                f"Loss became non-finite at iteration {iteration}.",
                [{"field": name, "reason": str(_scalar(value))} for name, value in terms.items()],
            )

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()

        row = {"iteration": iteration, "lr": lr}
        row.update({name: _scalar(value) for name, value in terms.items()})
        rows.append(row)
        progress.set_postfix(loss=f"{row['loss']:.4f}")
        if (iteration + 1) % config.log_every == 0:
            logger.info("{} it {}/{} lr {:.6f} {}", kind, iteration + 1, config.iterations, lr,
                        " ".join(f"{k} {row[k]:.4f}" for k in terms))
        if config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0 \
                and iteration + 1 < config.iterations:
            save_checkpoint(os.path.join(out_dir, f"{kind}_{iteration + 1:06d}.pt"), model, kind, model_config,
                            {"iteration": iteration + 1})

    path = os.path.join(out_dir, f"{kind}.pt")
    ident = save_checkpoint(path, model, kind, model_config, {"iteration": config.iterations})
    trace = pd.DataFrame(rows)
    trace_path = os.path.join(out_dir, TRACE)
    trace.to_csv(trace_path, index=False)
    logger.info("{} training finished after {} iterations", kind, config.iterations)
    return TrainResult(path, ident, trace_path, trace)


def train_detector(corpus: Corpus, config: TrainConfig, out_dir: str, device: str = Config.DEVICE) -> TrainResult:
    torch.manual_seed(config.seed)
    model = TableDetector(config.model_config())
    return _fit(model, "det", DetectorSamples(corpus, config), detector_step, config, out_dir, device)


def train_tsr(corpus: Corpus, config: TrainConfig, out_dir: str, device: str = Config.DEVICE) -> TrainResult:
    torch.manual_seed(config.seed)
    model = TableRecognizer(config.model_config())
    return _fit(model, "tsr", TableSamples(corpus, config), tsr_step, config, out_dir, device)
