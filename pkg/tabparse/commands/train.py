import os

import click

from ..config import Config, TrainConfig, load_config
from ..corpus import Corpus
from ..trainer import TRACE, train_detector, train_tsr
from . import MANIFEST, echo_json, handles_errors, write_manifest


@click.command("train")
@click.argument("model", type=click.Choice(["det", "tsr"]))
@click.option("--corpus", "corpus_dir", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key=value file with TrainConfig fields")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="overrides the config seed")
@click.option("--workers", type=click.IntRange(min=0), default=None, help="data loader workers")
@click.option("--device", default=Config.DEVICE, show_default=True)
@handles_errors
def train_cmd(model, corpus_dir, config_path, out_dir, seed, workers, device):
    """Train the table detector (det) or the structure recognizer (tsr)."""
    config = load_config(TrainConfig, config_path, {"seed": seed, "loader_workers": workers})
    corpus = Corpus(corpus_dir)
    manifest = os.path.join(out_dir, MANIFEST)
    checkpoint = os.path.join(out_dir, f"{model}.pt")
    outputs = [checkpoint, os.path.join(out_dir, TRACE)]
    write_manifest(manifest, f"train {model}", config_path, config.seed, [corpus_dir], outputs,
                   config=config.to_dict())

    train = train_detector if model == "det" else train_tsr
    result = train(corpus, config, out_dir, device)
    write_manifest(manifest, f"train {model}", config_path, config.seed, [corpus_dir], outputs,
                   {model: result.checkpoint_id}, config.to_dict())
    echo_json({"checkpoint": result.checkpoint, "checkpointId": result.checkpoint_id, "trace": result.trace_path})
