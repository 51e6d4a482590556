import os
from functools import partial

import click

from ..checkpoints import checkpoint_id, load_checkpoint
from ..config import Config
from ..detector import Detection
from ..errors import ValidationError
from ..imaging import load_image
from ..pipeline import PageJob, parse_pages, to_html, to_json
from ..serializers import dump_json, load_json, parse_annotation_json
from . import MANIFEST, echo_json, handles_errors, write_manifest


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _job(path: str, annotation_dir, oracle_tables: bool) -> PageJob:
    texts, detections = None, None
    if annotation_dir:
        source = os.path.join(annotation_dir, f"{_stem(path)}.json")
        if not os.path.isfile(source):
            raise ValidationError("No annotation for image.", [{"field": "annotations", "reason": source}])
        doc = parse_annotation_json(load_json(source))
        texts = [t for table in doc.tables for t in table.text_boxes()] + list(doc.page_text)
        if oracle_tables:
            detections = [Detection(t.quad, 1.0) for t in doc.tables]
    return PageJob(os.path.basename(path), partial(load_image, path), texts, detections)


@click.command("infer")
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--det-checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--tsr-checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--annotations", "annotation_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="annotation JSONs named after the images; their text boxes become cell content")
@click.option("--oracle-tables", is_flag=True, help="use the annotated table quads instead of the detector")
@click.option("--html", is_flag=True, help="also write one HTML file per table")
@click.option("--workers", type=click.IntRange(min=1), default=Config.WORKERS, show_default=True)
@click.option("--device", default=Config.DEVICE, show_default=True)
@handles_errors
def infer_cmd(images, det_checkpoint, tsr_checkpoint, out_dir, annotation_dir, oracle_tables, html, workers, device):
    """Detect tables and recognize their structure; one JSON per image."""
    if oracle_tables and not annotation_dir:
        raise ValidationError("--oracle-tables needs --annotations.", [{"field": "annotations", "reason": "required"}])
    if not oracle_tables and not det_checkpoint:
        raise ValidationError("A detector checkpoint is required.", [{"field": "det-checkpoint", "reason": "required"}])

    detector = load_checkpoint(det_checkpoint, "det", device) if det_checkpoint else None
    recognizer = load_checkpoint(tsr_checkpoint, "tsr", device)
    checkpoints = {"tsr": checkpoint_id(tsr_checkpoint)}
    if det_checkpoint:
        checkpoints["det"] = checkpoint_id(det_checkpoint)

    outputs = [os.path.join(out_dir, f"{_stem(p)}.json") for p in images]
    write_manifest(os.path.join(out_dir, MANIFEST), "infer", None, None, list(images), outputs, checkpoints)

    jobs = [_job(p, annotation_dir, oracle_tables) for p in images]
    pages = parse_pages(jobs, detector, recognizer, workers)
    for path, target, page in zip(images, outputs, pages):
        dump_json(target, to_json(page))
        if html:
            for k, table in enumerate(page.tables):
                with open(os.path.join(out_dir, f"{_stem(path)}.table{k}.html"), "w", encoding="utf-8") as fh:
                    fh.write(to_html(table.structure) + "\n")
    echo_json({"out": out_dir, "pages": len(pages), "tables": sum(len(p.tables) for p in pages)})
