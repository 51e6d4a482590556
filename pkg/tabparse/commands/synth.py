import os

import click

from ..config import Config, SynthConfig, load_config
from ..corpus import ANNOTATIONS, IMAGES, MANIFEST as CORPUS_MANIFEST, write_corpus
from . import MANIFEST, echo_json, handles_errors, write_manifest


@click.command("synth")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key=value file with SynthConfig fields")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--count", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=Config.WORKERS, show_default=True)
@handles_errors
def synth_cmd(config_path, out_dir, count, seed, workers):
    """Generate a synthetic corpus of table pages."""
    config = load_config(SynthConfig, config_path)
    outputs = [os.path.join(out_dir, IMAGES), os.path.join(out_dir, ANNOTATIONS), os.path.join(out_dir, CORPUS_MANIFEST)]
    write_manifest(os.path.join(out_dir, MANIFEST), "synth", config_path, seed, [], outputs, config=config.to_dict())

    names = write_corpus(out_dir, config, count, seed, workers)
    echo_json({"out": out_dir, "pages": len(names)})
