"""Table detection and split-and-merge table structure recognition."""
import sys

import click
from loguru import logger

from .config import Config

__version__ = "0.1.0"


def create_cli() -> click.Group:
    from .commands.eval import eval_cmd
    from .commands.infer import infer_cmd
    from .commands.overlay import overlay_cmd
    from .commands.synth import synth_cmd
    from .commands.train import train_cmd

    logger.remove()
    logger.add(sys.stderr, level=Config.LOG_LEVEL)

    @click.group(context_settings={"auto_envvar_prefix": "TABPARSE", "help_option_names": ["-h", "--help"]})
    @click.version_option(__version__, prog_name="tabparse")
    def cli():
        """Detect tables in page images and recognize their structure."""

    # commands
    cli.add_command(synth_cmd)
    cli.add_command(train_cmd)
    cli.add_command(infer_cmd)
    cli.add_command(eval_cmd)
    cli.add_command(overlay_cmd)

    return cli
