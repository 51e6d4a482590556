"""Residual backbones: a dilated-C5 trunk for detection and a ResNet-FPN trunk for structure recognition."""
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

# variant -> (blocks per stage, stage widths)
VARIANTS: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {
    "resnet18": ((2, 2, 2, 2), (64, 128, 256, 512)),
    "tiny": ((1, 1, 1, 1), (16, 32, 64, 128)),
}


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ResNet(nn.Module):
    """ResNet trunk returning C2..C5.

    With `dilate_c5` the last stage keeps stride 16 and dilates its
    convolutions by 2 instead of striding.
    """

    def __init__(self, variant: str = "resnet18", dilate_c5: bool = False):
        super().__init__()
        if variant not in VARIANTS:
            raise ValidationError("Unknown backbone variant.", [{"field": "backbone", "reason": variant}])
        depths, widths = VARIANTS[variant]
        self.widths = widths

        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )

        stages: List[nn.Sequential] = []
        cin = widths[0]
        for i, (depth, width) in enumerate(zip(depths, widths)):
            stride = 1 if i == 0 else 2
            dilation = 1
            if i == 3 and dilate_c5:
                stride, dilation = 1, 2
            blocks = [BasicBlock(cin, width, stride=stride, dilation=dilation)]
            blocks += [BasicBlock(width, width, dilation=dilation) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = width
        self.stages = nn.ModuleList(stages)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _check_image(x: torch.Tensor, multiple: int = 1) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValidationError("Expected an N x 3 x H x W image batch.", [{"field": "image", "reason": "bad_shape"}])
    h, w = x.shape[-2:]
    if h < 32 or w < 32:
        raise ValidationError("Image sides must be at least 32 pixels.", [{"field": "image", "reason": "too_small"}])
    if h % multiple or w % multiple:
        raise ValidationError(f"Image sides must be multiples of {multiple}.",
                              [{"field": "image", "reason": "not_padded"}])


class DetectorBackbone(nn.Module):
    """Dilated-C5 feature map: stride 16, reduced to `channels` by a 1x1 convolution."""

    stride = 16

    def __init__(self, variant: str = "resnet18", channels: int = 64):
        super().__init__()
        self.body = ResNet(variant, dilate_c5=True)
        self.reduce = nn.Conv2d(self.body.widths[-1], channels, 1)
        nn.init.normal_(self.reduce.weight, std=0.01)
        nn.init.zeros_(self.reduce.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x)
        return self.reduce(self.body(x)[-1])


class FPNBackbone(nn.Module):
    """Feature pyramid over C2..C5; only the stride-4 level P2 is exposed."""

    stride = 4

    def __init__(self, variant: str = "resnet18", channels: int = 64):
        super().__init__()
        self.body = ResNet(variant)
        self.lateral = nn.ModuleList([nn.Conv2d(w, channels, 1) for w in self.body.widths])
        self.smooth = nn.Conv2d(channels, channels, 3, padding=1)
        for m in list(self.lateral) + [self.smooth]:
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, multiple=32)
        feats = self.body(x)
        top = self.lateral[-1](feats[-1])
        for lateral, feat in zip(reversed(list(self.lateral)[:-1]), reversed(feats[:-1])):
            top = lateral(feat) + F.interpolate(top, size=feat.shape[-2:], mode="nearest")
        return self.smooth(top)
