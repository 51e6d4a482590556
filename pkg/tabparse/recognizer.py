"""Table structure recognizer: one ResNet-FPN trunk shared by the split head and the cell merger."""
from typing import Tuple

import torch
import torch.nn as nn

from .backbone import FPNBackbone
from .config import ModelConfig
from .merger import CellMerger
from .splitter import SplitHead


class TableRecognizer(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        self.backbone = FPNBackbone(config.backbone, config.channels)
        self.split = SplitHead(config.channels, config.kernel_width)
        self.merger = CellMerger(config.channels, config.grid_dim)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(P2, row mask (B,1,H,W/8), column mask (B,1,H/8,W))."""
        p2 = self.backbone(images)
        row, col = self.split(p2)
        return p2, row, col

    def split_forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _, row, col = self(images)
        return row, col


def recognizer_loss(split: torch.Tensor, merge: torch.Tensor) -> torch.Tensor:
    return split + merge
