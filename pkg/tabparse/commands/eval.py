import os

import click
from loguru import logger

from ..corpus import Corpus
from ..metrics import evaluate_pairs
from ..pipeline import PageResult
from ..serializers import dump_json, load_json, make_report_json, parse_page_json
from . import MANIFEST, echo_json, handles_errors, write_manifest


def load_predictions(pred_dir: str):
    pages = {}
    for name in sorted(os.listdir(pred_dir)):
        if not name.endswith(".json") or name == MANIFEST:
            continue
        data = load_json(os.path.join(pred_dir, name))
        if isinstance(data, dict) and "image" in data and "tables" in data:
            pages[data["image"]] = parse_page_json(data)
    return pages


@click.command("eval")
@click.argument("pred_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("gt_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True)
@handles_errors
def eval_cmd(pred_dir, gt_dir, report_path):
    """Score pipeline JSON against a corpus: detection P/R/F1, adjacency F1 and TEDS-Struct."""
    corpus = Corpus(gt_dir)
    write_manifest(f"{report_path}.{MANIFEST}", "eval", None, None, [pred_dir, gt_dir], [report_path])

    predictions = load_predictions(pred_dir)
    pairs = []
    for i in range(len(corpus)):
        doc = corpus.annotation(i)
        pred = predictions.get(doc.image)
        if pred is None:
            logger.warning("no prediction for {}", doc.image)
            pred = PageResult(doc.image, doc.width, doc.height)
        pairs.append((pred, doc))

    report = make_report_json(evaluate_pairs(pairs))
    dump_json(report_path, report)
    echo_json({k: report[k] for k in ("wavgF1", "adjacencyF1", "tedsStruct")})
