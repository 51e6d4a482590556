"""Neural building blocks shared by the detector and the structure recognizer."""
from contextlib import contextmanager
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .errors import GeometryError

SCAN_DIMS = {"top": 2, "bottom": 2, "left": 3, "right": 3}


def directional_pool(x: torch.Tensor, direction: str) -> torch.Tensor:
    """Running max of an NCHW map.

    top: max over the locations below (same column); left: max over the
    locations to the right (same row); bottom and right mirror them.
    """
    dim = SCAN_DIMS[direction]
    if direction in ("top", "left"):
        flipped = torch.flip(x, dims=[dim])
        return torch.flip(torch.cummax(flipped, dim=dim).values, dims=[dim])
    return torch.cummax(x, dim=dim).values


def corner_pool(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "top_left":
        return directional_pool(x, "top") + directional_pool(x, "left")
    if kind == "bottom_right":
        return directional_pool(x, "bottom") + directional_pool(x, "right")
    raise ValueError(f"unknown corner kind: {kind}")


def conv_bn_relu(cin: int, cout: int, k: int = 3, relu: bool = True) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class CornerPool(nn.Module):
    """Corner pooling fused with its input through a residual connection."""

    SCANS = {"top_left": ("top", "left"), "bottom_right": ("bottom", "right")}

    def __init__(self, channels: int, kind: str):
        super().__init__()
        if kind not in self.SCANS:
            raise ValueError(f"unknown corner kind: {kind}")
        self.kind = kind
        self.branch_a = conv_bn_relu(channels, channels)
        self.branch_b = conv_bn_relu(channels, channels)
        self.fuse = conv_bn_relu(channels, channels, relu=False)
        self.skip = conv_bn_relu(channels, channels, k=1, relu=False)
        self.out = conv_bn_relu(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scan_a, scan_b = self.SCANS[self.kind]
        pooled = directional_pool(self.branch_a(x), scan_a) + directional_pool(self.branch_b(x), scan_b)
        return self.out(F.relu(self.fuse(pooled) + self.skip(x)))


def roi_align_boxes(feature: torch.Tensor, boxes_xyxy: torch.Tensor, stride: float,
                    output_size: int = 7) -> torch.Tensor:
    """RoI-align image-space boxes on one NCHW map (N must be 1 or boxes carry batch ids).

    `boxes_xyxy` is (K, 4) for a single image or (K, 5) with a leading batch index.
    """
    if boxes_xyxy.numel() == 0:
        c = feature.shape[1]
        return feature.new_zeros((0, c, output_size, output_size))
    if boxes_xyxy.shape[1] == 4:
        ids = boxes_xyxy.new_zeros((boxes_xyxy.shape[0], 1))
        rois = torch.cat([ids, boxes_xyxy], dim=1)
    else:
        rois = boxes_xyxy

    h, w = feature.shape[-2:]
    extent_w, extent_h = w * stride, h * stride
    outside = (rois[:, 3] <= 0) | (rois[:, 4] <= 0) | (rois[:, 1] >= extent_w) | (rois[:, 2] >= extent_h)
    if bool(outside.any()):
        raise GeometryError("RoI lies entirely outside the feature map.",
                            [{"field": "box", "reason": "outside_feature_extent"}])

    return roi_align(feature, rois.to(feature.dtype), output_size=(output_size, output_size),
                     spatial_scale=1.0 / stride, sampling_ratio=2, aligned=False)


def downsample_block(x: torch.Tensor, axis: str, conv: nn.Conv2d) -> torch.Tensor:
    if axis == "width":
        if x.shape[3] % 2:
            x = F.pad(x, (0, 1, 0, 0), mode="replicate")
        x = F.max_pool2d(x, kernel_size=(1, 2), stride=(1, 2))
    elif axis == "height":
        if x.shape[2] % 2:
            x = F.pad(x, (0, 0, 0, 1), mode="replicate")
        x = F.max_pool2d(x, kernel_size=(2, 1), stride=(2, 1))
    else:
        raise ValueError(f"unknown axis: {axis}")
    return F.relu(conv(x))


class DownsampleBlock(nn.Module):
    def __init__(self, channels: int, axis: str):
        super().__init__()
        self.axis = axis
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return downsample_block(x, self.axis, self.conv)


# direction -> (slice dim, reversed)
PROPAGATIONS = {
    "left_to_right": (3, False),
    "right_to_left": (3, True),
    "top_to_bottom": (2, False),
    "bottom_to_top": (2, True),
}


def scnn_propagate(x: torch.Tensor, direction: str, weight: torch.Tensor,
                   bias: torch.Tensor = None) -> torch.Tensor:
    """Sequential slice-by-slice message passing.

    slice_1' = slice_1; slice_{k+1}' = slice_{k+1} + relu(conv(slice_k')) with a
    1-d kernel (C, C, K) running along each slice.
    """
    dim, reverse = PROPAGATIONS[direction]
    slices = list(torch.unbind(x, dim=dim))
    if reverse:
        slices = slices[::-1]

    pad = weight.shape[-1] // 2
    out = [slices[0]]
    for current in slices[1:]:
        message = F.relu(F.conv1d(out[-1], weight, bias, padding=pad))
        out.append(current + message)

    if reverse:
        out = out[::-1]
    return torch.stack(out, dim=dim)


class SpatialPropagation(nn.Module):
    def __init__(self, channels: int, direction: str, kernel_width: int = 9):
        super().__init__()
        if kernel_width % 2 == 0:
            raise ValueError("kernel_width must be odd")
        if direction not in PROPAGATIONS:
            raise ValueError(f"unknown direction: {direction}")
        self.direction = direction
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_width))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.normal_(self.weight, std=0.01)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return scnn_propagate(x, self.direction, self.weight, self.bias)


def normal_init(modules: Sequence[nn.Module], std: float = 0.01) -> None:
    for module in modules:
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(m.weight, std=std)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)


@contextmanager
def evaluating(model: nn.Module) -> Iterator[nn.Module]:
    """Eval mode for the duration of the block; the caller's train/eval mode is restored after."""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)
