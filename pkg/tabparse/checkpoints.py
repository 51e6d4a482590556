"""Checkpoint archives: a config header plus the model's state dict."""
import hashlib
import os
from typing import Any, Dict, Optional

import torch
import torch.nn as nn
from loguru import logger

from .config import ModelConfig
from .errors import CheckpointError, ConfigError

KINDS = ("det", "tsr")


def _build(kind: str, config: ModelConfig) -> nn.Module:
    if kind == "det":
        from .detector import TableDetector

        return TableDetector(config)
    from .recognizer import TableRecognizer

    return TableRecognizer(config)


def save_checkpoint(path: str, model: nn.Module, kind: str, model_config: ModelConfig,
                    extra: Optional[Dict[str, Any]] = None) -> str:
    if kind not in KINDS:
        raise CheckpointError("Unknown checkpoint kind.", [{"field": "kind", "reason": kind}])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    from . import __version__

    torch.save({
        "kind": kind,
        "version": __version__,
        "config": model_config.to_dict(),
        "extra": dict(extra or {}),
        "state_dict": model.state_dict(),
    }, path)
    logger.info("saved {} checkpoint to {}", kind, path)
    return checkpoint_id(path)


def checkpoint_id(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def load_checkpoint(path: str, expected_kind: Optional[str] = None, device: str = "cpu") -> nn.Module:
    if not path or not os.path.isfile(path):
        raise CheckpointError("Checkpoint not found.", [{"field": "checkpoint", "reason": str(path)}])
    try:
        archive = torch.load(path, map_location=device, weights_only=True)
    except Exception as exc:
        raise CheckpointError("Checkpoint could not be read.", [{"field": "checkpoint", "reason": str(exc)}])

    if not isinstance(archive, dict) or not {"kind", "config", "state_dict"} <= set(archive):
        raise CheckpointError("Checkpoint is missing its header.", [{"field": "checkpoint", "reason": "bad_header"}])
    kind = archive["kind"]
    if kind not in KINDS or (expected_kind and kind != expected_kind):
        raise CheckpointError(f"Expected a '{expected_kind}' checkpoint, got '{kind}'.",
                              [{"field": "checkpoint", "reason": "wrong_kind"}])
    try:
        config = ModelConfig.from_dict(archive["config"])
    except ConfigError as exc:
        raise CheckpointError("Checkpoint config header is invalid.", exc.details)

    model = _build(kind, config)
    try:
        model.load_state_dict(archive["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError("Checkpoint weights do not match the model.",
                              [{"field": "state_dict", "reason": str(exc).splitlines()[0]}])
    return model.to(device).eval()
