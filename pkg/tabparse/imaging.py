"""Image loading, resizing and tensor conversion shared by training and inference."""
from typing import Tuple

import cv2
import numpy as np
import torch
from PIL import Image

from .config import Config
from .errors import ValidationError


def load_image(path: str) -> np.ndarray:
    """RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError):
        raise ValidationError("Image could not be read.", [{"field": "image", "reason": path}])


def save_image(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def resize(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape[:2]
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    if size == (w, h):
        return image.copy()
    return cv2.resize(image, size, interpolation=cv2.INTER_LINEAR)


def detection_scale(height: int, width: int, short_side: int, long_side_max: int) -> float:
    scale = short_side / min(height, width)
    if max(height, width) * scale > long_side_max:
        scale = long_side_max / max(height, width)
    return scale


def resize_for_detection(image: np.ndarray, short_side: int = Config.DET_SHORT_SIDE,
                         long_side_max: int = Config.DET_LONG_SIDE_MAX) -> Tuple[np.ndarray, float]:
    h, w = image.shape[:2]
    scale = detection_scale(h, w, short_side, long_side_max)
    return resize(image, scale), scale


def pad_to_size(image: np.ndarray, height: int, width: int, value: int = 255) -> np.ndarray:
    """Pad bottom and right; content stays at the origin."""
    h, w = image.shape[:2]
    if (height, width) == (h, w):
        return image
    out = np.full((height, width) + image.shape[2:], value, dtype=image.dtype)
    out[:h, :w] = image
    return out


def padded_size(height: int, width: int, multiple: int = 32) -> Tuple[int, int]:
    return -(-max(height, 32) // multiple) * multiple, -(-max(width, 32) // multiple) * multiple


def pad_to_multiple(image: np.ndarray, multiple: int = 32, value: int = 255) -> np.ndarray:
    return pad_to_size(image, *padded_size(*image.shape[:2], multiple=multiple), value=value)


def batch_tensor(images, multiple: int = 32) -> torch.Tensor:
    """Stack images of different sizes into one padded (B, 3, H, W) batch."""
    height = max(im.shape[0] for im in images)
    width = max(im.shape[1] for im in images)
    ph, pw = padded_size(height, width, multiple)
    return torch.stack([image_to_tensor(pad_to_size(im, ph, pw)) for im in images])


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HWC uint8 RGB -> normalized CHW float32."""
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(Config.IMAGE_MEAN).view(3, 1, 1)
    std = torch.tensor(Config.IMAGE_STD).view(3, 1, 1)
    return (x - mean) / std
