"""Corpus on disk (images/NNNN.png + annotations/NNNN.json) and training sample construction."""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from loguru import logger
from tqdm import tqdm

from .annotation import DocAnnotation, TableAnnotation
from .config import Config, SynthConfig
from .datagen import synthesize_page
from .errors import ValidationError
from .geometry import QuadBox
from .imaging import detection_scale, load_image, resize, save_image
from .pipeline import CropTransform, crop_and_resize
from .serializers import dump_json, load_json, make_annotation_json, make_corpus_json, parse_annotation_json

IMAGES = "images"
ANNOTATIONS = "annotations"
MANIFEST = "corpus.json"


def page_name(index: int) -> str:
    return f"{index:04d}"


def write_corpus(out_dir: str, config: SynthConfig, count: int, seed: int, workers: int = 1) -> List[str]:
    """Generate `count` pages; page i is drawn from the seed pair (seed, i)."""
    os.makedirs(os.path.join(out_dir, IMAGES), exist_ok=True)
    os.makedirs(os.path.join(out_dir, ANNOTATIONS), exist_ok=True)

    def build(index: int) -> str:
        name = page_name(index)
        image, doc = synthesize_page(config, (seed, index), image_id=f"{name}.png")
        save_image(os.path.join(out_dir, IMAGES, f"{name}.png"), image)
        dump_json(os.path.join(out_dir, ANNOTATIONS, f"{name}.json"), make_annotation_json(doc))
        return name

    indices = range(count)
    if workers <= 1:
        names = [build(i) for i in tqdm(indices, desc="synth", leave=False)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            names = list(tqdm(pool.map(build, indices), total=count, desc="synth", leave=False))

    dump_json(os.path.join(out_dir, MANIFEST), make_corpus_json(config.to_dict(), seed, names))
    logger.info("wrote {} pages to {}", len(names), out_dir)
    return names


class Corpus:
    """Read access to a corpus directory; pages load lazily."""

    def __init__(self, root: str):
        self.root = root
        folder = os.path.join(root, ANNOTATIONS)
        if not os.path.isdir(folder):
            raise ValidationError("Corpus directory has no annotations.", [{"field": "corpus", "reason": root}])
        self.names = sorted(os.path.splitext(f)[0] for f in os.listdir(folder) if f.endswith(".json"))

    def __len__(self) -> int:
        return len(self.names)

    def annotation(self, index: int) -> DocAnnotation:
        return parse_annotation_json(load_json(os.path.join(self.root, ANNOTATIONS, f"{self.names[index]}.json")))

    def __getitem__(self, index: int) -> Tuple[np.ndarray, DocAnnotation]:
        doc = self.annotation(index)
        return load_image(os.path.join(self.root, IMAGES, doc.image)), doc

    def tables(self) -> List[Tuple[int, int]]:
        """(page index, table index) for every table in the corpus."""
        return [(p, t) for p in range(len(self)) for t in range(len(self.annotation(p).tables))]


# ---------------------------------------------------------------- training samples

@dataclass
class TableSample:
    crop: np.ndarray
    table: TableAnnotation
    transform: CropTransform


def table_crop_sample(image: np.ndarray, table: TableAnnotation, long_side: int = Config.TSR_LONG_SIDE) -> TableSample:
    """Crop a ground-truth table the way inference crops a detection, with the table mapped into the crop."""
    crop, transform = crop_and_resize(image, table.quad, long_side)
    return TableSample(crop, table.transformed(transform.to_crop), transform)


def page_sample(image: np.ndarray, doc: DocAnnotation, short_side: int,
                long_side_max: int = Config.DET_LONG_SIDE_MAX) -> Tuple[np.ndarray, DocAnnotation, float]:
    h, w = image.shape[:2]
    scale = detection_scale(h, w, short_side, long_side_max)
    resized = resize(image, scale)
    rh, rw = resized.shape[:2]
    return resized, doc.transformed(lambda pts: pts * scale, rw, rh), scale


def _top_left_first(quad: QuadBox) -> QuadBox:
    pts = list(quad.points)
    start = int(np.argmin([x + y for x, y in pts]))
    return QuadBox(tuple(pts[start:] + pts[:start]))


def rotate_page(image: np.ndarray, doc: DocAnnotation, angle: float) -> Tuple[np.ndarray, DocAnnotation]:
    """Rotate counter-clockwise by `angle` degrees on an enlarged white canvas.

    Only the table quads and outlines stay meaningful afterwards; rotated pages
    are detector training material.
    """
    h, w = image.shape[:2]
    rad = math.radians(angle)
    cos, sin = abs(math.cos(rad)), abs(math.sin(rad))
    nw = int(math.ceil(w * cos + h * sin - 1e-6))
    nh = int(math.ceil(w * sin + h * cos - 1e-6))

    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    m[0, 2] += nw / 2.0 - w / 2.0
    m[1, 2] += nh / 2.0 - h / 2.0
    rotated = cv2.warpAffine(image, m, (nw, nh), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=(255, 255, 255))

    a, b = m[:, :2], m[:, 2]

    def move(pts: np.ndarray) -> np.ndarray:
        # pixel-index affine applied to continuous coordinates
        return (pts - 0.5) @ a.T + b + 0.5

    moved = doc.transformed(move, nw, nh)
    tables = tuple(replace(t, quad=_top_left_first(t.quad)) for t in moved.tables)
    return rotated, replace(moved, tables=tables)


def random_rotation(rng: np.random.Generator, rotations: Sequence[int], jitter: float) -> float:
    return float(rng.choice(np.asarray(rotations))) + float(rng.uniform(-jitter, jitter))

