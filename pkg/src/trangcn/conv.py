"""Residual backbone whose last stage keeps the stride-16 resolution."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import check_image, conv3x3, normalize_image


@dataclass
class ConvFeatures:
    full: torch.Tensor   # (B, C_res, rows/16, cols/16) with stage-4 stride 1
    early: torch.Tensor  # (B, C_early, rows/8, cols/8), output of the first two stages


class ResidualBlock(nn.Module):
    """``relu(transform(x) + shortcut(x))`` with a 1x1 projection when shapes change."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(c_in, c_out, stride)
        self.conv2 = conv3x3(c_out, c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ConvBranch(nn.Module):
    def __init__(self, stem_channels: int = 16, channels=(16, 32, 48, 64), blocks_per_stage: int = 1,
                 stage4_stride: int = 1, embed_dim: int = 64):
        super().__init__()
        # stem downsamples by 4, as the ResNet stem does
        self.stem = nn.Sequential(conv3x3(3, stem_channels, 2), nn.ReLU(),
                                  conv3x3(stem_channels, stem_channels, 2), nn.ReLU())
        strides = (1, 2, 2, stage4_stride)
        stages = []
        c_in = stem_channels
        for c_out, stride in zip(channels, strides):
            blocks = [ResidualBlock(c_in, c_out, stride)]
            blocks += [ResidualBlock(c_out, c_out) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.early_dim = channels[1]
        self.feature_dim = channels[-1]
        self.embed = nn.Linear(self.feature_dim, embed_dim)

    def extract_conv_features(self, images: torch.Tensor) -> ConvFeatures:
        check_image(images, 32)
        x = self.stem(normalize_image(images))
        x = self.stages[0](x)
        early = self.stages[1](x)
        full = self.stages[3](self.stages[2](early))
        return ConvFeatures(full=full, early=early)

    def global_embed(self, features: ConvFeatures) -> torch.Tensor:
        return self.embed(features.full.mean(dim=(2, 3)))

    def forward(self, images: torch.Tensor) -> ConvFeatures:
        return self.extract_conv_features(images)
