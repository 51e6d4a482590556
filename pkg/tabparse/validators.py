from typing import Any, Dict, List

from .config import ModelConfig, SynthConfig, TrainConfig

BACKBONES = ("resnet18", "tiny")


def _positive(details: List[Dict[str, str]], obj: Any, *names: str) -> None:
    for name in names:
        if getattr(obj, name) < 1:
            details.append({"field": name, "reason": "must_be_positive"})


def _probability(details: List[Dict[str, str]], obj: Any, *names: str) -> None:
    for name in names:
        value = getattr(obj, name)
        if not 0.0 <= value <= 1.0:
            details.append({"field": name, "reason": "out_of_range"})


def validate_model_config(config: Any) -> List[Dict[str, str]]:
    details: List[Dict[str, str]] = []
    if config.backbone not in BACKBONES:
        details.append({"field": "backbone", "reason": "unknown_variant"})
    if config.kernel_width < 1 or config.kernel_width % 2 == 0:
        details.append({"field": "kernel_width", "reason": "must_be_odd"})
    _positive(details, config, "grid_dim", "frcn_dim")
    return details


def validate_train_config(config: TrainConfig) -> List[Dict[str, str]]:
    details = validate_model_config(config)

    if config.base_lr <= 0:
        details.append({"field": "base_lr", "reason": "must_be_positive"})
    if not 0.0 <= config.momentum < 1.0:
        details.append({"field": "momentum", "reason": "out_of_range"})
    if config.weight_decay < 0:
        details.append({"field": "weight_decay", "reason": "must_be_non_negative"})

    _positive(
        details, config,
        "iterations", "images_per_step", "jitter_per_gt", "max_proposals",
        "ohem_proposals_pos", "ohem_proposals_neg", "split_pixels",
        "ohem_pairs_pos", "ohem_pairs_neg", "log_every", "checkpoint_every",
    )
    if config.random_proposals < 0:
        details.append({"field": "random_proposals", "reason": "must_be_non_negative"})
    if config.loader_workers < 0:
        details.append({"field": "loader_workers", "reason": "must_be_non_negative"})

    if any(step >= config.iterations or step < 1 for step in config.decay_steps):
        details.append({"field": "decay_steps", "reason": "must_precede_last_iteration"})
    if list(config.decay_steps) != sorted(config.decay_steps):
        details.append({"field": "decay_steps", "reason": "must_be_sorted"})

    if not config.scales or any(s < 32 for s in config.scales):
        details.append({"field": "scales", "reason": "must_be_at_least_32"})
    if not config.tsr_scales or any(s < 32 for s in config.tsr_scales):
        details.append({"field": "tsr_scales", "reason": "must_be_at_least_32"})
    if any(r % 90 for r in config.rotations):
        details.append({"field": "rotations", "reason": "must_be_multiples_of_90"})
    if not 0.0 <= config.jitter_ratio < 0.5:
        details.append({"field": "jitter_ratio", "reason": "out_of_range"})
    if config.grad_clip <= 0:
        details.append({"field": "grad_clip", "reason": "must_be_positive"})
    return details


def validate_synth_config(config: SynthConfig) -> List[Dict[str, str]]:
    details: List[Dict[str, str]] = []

    if not 2 <= config.min_rows <= config.max_rows <= 12:
        details.append({"field": "max_rows", "reason": "rows_must_be_within_2_12"})
    if not 2 <= config.min_cols <= config.max_cols <= 8:
        details.append({"field": "max_cols", "reason": "cols_must_be_within_2_8"})
    if not 1 <= config.min_tables <= config.max_tables <= 3:
        details.append({"field": "max_tables", "reason": "tables_must_be_within_1_3"})

    _probability(
        details, config,
        "ruling_prob", "span_prob", "empty_prob", "blank_col_prob",
        "multiline_prob", "paragraph_prob", "curve_prob",
    )

    if config.blank_scale_max < 1.0:
        details.append({"field": "blank_scale_max", "reason": "must_be_at_least_1"})
    if not 4 <= config.min_text_height <= config.max_text_height:
        details.append({"field": "max_text_height", "reason": "invalid_range"})
    if config.curve_amplitude < 0 or config.curve_wavelength <= 0:
        details.append({"field": "curve_amplitude", "reason": "must_be_non_negative"})
    elif config.curve_amplitude >= config.curve_wavelength / 8.0:
        details.append({"field": "curve_amplitude", "reason": "warp_not_invertible"})
    if config.page_width < 256 or config.page_height < 256:
        details.append({"field": "page_width", "reason": "page_too_small"})
    if config.margin < 0 or 2 * config.margin >= min(config.page_width, config.page_height):
        details.append({"field": "margin", "reason": "out_of_range"})
    return details


def validate_config(config: Any) -> List[Dict[str, str]]:
    if isinstance(config, TrainConfig):
        return validate_train_config(config)
    if isinstance(config, SynthConfig):
        return validate_synth_config(config)
    if isinstance(config, ModelConfig):
        return validate_model_config(config)
    return []
