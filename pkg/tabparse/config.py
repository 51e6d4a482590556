import dataclasses
import os
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, get_type_hints

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

load_dotenv()

ENV_PREFIX = "TABPARSE_"


def _env(name: str, default: str) -> str:
    return os.environ.get(ENV_PREFIX + name, default)


class Config:
    DEVICE = _env("DEVICE", "cpu")
    LOG_LEVEL = _env("LOG_LEVEL", "INFO")
    WORKERS = int(_env("WORKERS", "1"))

    # table detection at test time
    DET_SHORT_SIDE = int(_env("DET_SHORT_SIDE", "512"))
    DET_LONG_SIDE_MAX = int(_env("DET_LONG_SIDE_MAX", "1024"))
    DET_TOP_K = int(_env("DET_TOP_K", "100"))
    DET_CORNER_THRESHOLD = float(_env("DET_CORNER_THRESHOLD", "0.3"))
    DET_PROPOSAL_NMS = float(_env("DET_PROPOSAL_NMS", "0.7"))
    DET_FINAL_NMS = float(_env("DET_FINAL_NMS", "0.3"))
    DET_SCORE_THRESHOLD = float(_env("DET_SCORE_THRESHOLD", "0.5"))

    # table structure recognition at test time
    TSR_LONG_SIDE = int(_env("TSR_LONG_SIDE", "1024"))
    SEPARATOR_THRESHOLD = float(_env("SEPARATOR_THRESHOLD", "0.8"))
    MERGE_THRESHOLD = float(_env("MERGE_THRESHOLD", "0.8"))
    CONTENT_OVERLAP = float(_env("CONTENT_OVERLAP", "0.8"))

    IMAGE_MEAN = (0.485, 0.456, 0.406)
    IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny"
    channels: int = 64
    kernel_width: int = 9
    grid_dim: int = 512
    frcn_dim: int = 1024

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        return _from_mapping(cls, data, source="checkpoint header")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.032
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 2000
    decay_steps: Tuple[int, ...] = (1400, 1800)
    images_per_step: int = 4
    scales: Tuple[int, ...] = (320, 416, 512, 608, 704, 800)
    tsr_scales: Tuple[int, ...] = (416, 512, 608, 704, 800)
    rotate: bool = False
    rotations: Tuple[int, ...] = (0, 90, 180, 270)
    rotation_jitter: float = 5.0
    jitter_ratio: float = 0.1
    jitter_per_gt: int = 16
    random_proposals: int = 64
    max_proposals: int = 512
    ohem_proposals_pos: int = 32
    ohem_proposals_neg: int = 32
    split_pixels: int = 1024
    ohem_pairs_pos: int = 64
    ohem_pairs_neg: int = 64
    grad_clip: float = 10.0
    seed: int = 0
    backbone: str = "tiny"
    kernel_width: int = 9
    grid_dim: int = 512
    frcn_dim: int = 1024
    log_every: int = 50
    checkpoint_every: int = 500
    loader_workers: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            kernel_width=self.kernel_width,
            grid_dim=self.grid_dim,
            frcn_dim=self.frcn_dim,
        )

    def learning_rate(self, iteration: int) -> float:
        """Per-iteration lr: base lr scaled to the step size, /10 at every passed decay step."""
        lr = self.base_lr * self.images_per_step / 32.0
        for step in self.decay_steps:
            if iteration >= step:
                lr *= 0.1
        return lr

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SynthConfig:
    page_width: int = 768
    page_height: int = 960
    margin: int = 32
    min_rows: int = 2
    max_rows: int = 12
    min_cols: int = 2
    max_cols: int = 8
    min_tables: int = 1
    max_tables: int = 3
    ruling_prob: float = 0.5
    span_prob: float = 0.1
    empty_prob: float = 0.1
    blank_col_prob: float = 0.2
    blank_scale_max: float = 3.0
    multiline_prob: float = 0.15
    paragraph_prob: float = 0.8
    curve_prob: float = 0.0
    curve_amplitude: float = 4.0
    curve_wavelength: float = 400.0
    min_text_height: int = 8
    max_text_height: int = 12

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


C = TypeVar("C")


def _parse_value(raw: Any, hint: Any, key: str) -> Any:
    if not isinstance(raw, str):
        if hint in (tuple, Tuple) or getattr(hint, "__origin__", None) is tuple:
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if getattr(hint, "__origin__", None) is tuple:
            item = hint.__args__[0]
            return tuple(item(p.strip()) for p in text.split(",") if p.strip())
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "y", "on"):
                return True
            if text.lower() in ("0", "false", "no", "n", "off"):
                return False
            raise ValueError(text)
        return hint(text)
    except ValueError:
        raise ConfigError("Invalid config value.", [{"field": key, "reason": "invalid_value"}])


def _from_mapping(cls: Type[C], data: Mapping[str, Any], source: str) -> C:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}

    unknown = [k for k in data if k not in names]
    if unknown:
        raise ConfigError(
            f"Unknown config key '{unknown[0]}' in {source}.",
            [{"field": k, "reason": "unknown_key"} for k in unknown],
        )

    values = {k: _parse_value(v, hints[k], k) for k, v in data.items() if v is not None}
    return cls(**values)


def load_config(cls: Type[C], path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> C:
    """Read a dotenv-style key=value file into a config dataclass.

    Environment variables TABPARSE_<FIELD> win over the file; `overrides` win over both.
    """
    data: Dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError("Config file not found.", [{"field": "config", "reason": "not_found"}])
        data.update(dotenv_values(path))

    for f in dataclasses.fields(cls):
        env_value = os.environ.get(ENV_PREFIX + f.name.upper())
        if env_value is not None:
            data[f.name] = env_value

    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})

    config = _from_mapping(cls, data, source=path or "environment")

    from .validators import validate_config

    details = validate_config(config)
    if details:
        raise ConfigError("Invalid configuration.", details)
    return config
