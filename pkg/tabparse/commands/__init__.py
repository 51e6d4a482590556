"""Helpers shared by the subcommands: error reporting and run manifests."""
import functools
import json
import sys
from typing import Any, Callable, Dict, List, NoReturn, Optional

import click
from loguru import logger

from ..errors import TableError, error_payload
from ..serializers import dump_json, make_manifest_json

MANIFEST = "manifest.json"


def fail(code: str, message: str, details: Optional[List[Dict[str, str]]] = None) -> NoReturn:
    click.echo(json.dumps(error_payload(code, message, details)), err=True)
    sys.exit(1)


def handles_errors(fn: Callable) -> Callable:
    """Report TableError (and anything unexpected) as the JSON error payload on stderr, exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TableError as exc:
            fail(exc.code, exc.message, exc.details)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except Exception as exc:
            logger.exception("unexpected failure")
            fail("INTERNAL_ERROR", str(exc) or type(exc).__name__)

    return wrapper


def write_manifest(path: str, command: str, config_path: Optional[str], seed: Optional[int], inputs: List[str],
                   outputs: List[str], checkpoints: Optional[Dict[str, str]] = None,
                   config: Optional[Dict[str, Any]] = None) -> str:
    dump_json(path, make_manifest_json(command, config_path, seed, inputs, outputs, checkpoints, config))
    logger.debug("manifest written to {}", path)
    return path


def echo_json(payload: Any) -> None:
    click.echo(json.dumps(payload))
