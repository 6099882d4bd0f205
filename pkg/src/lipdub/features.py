"""Pluggable perceptual feature extractors.

Both the stage-2 reconstruction loss and the perceptual/temporal metrics take
an extractor as an injected dependency: any nn.Module whose forward maps a
[B, C, H, W] batch to a list of feature tensors. The default is a fixed
randomly-initialized conv stack whose layer 0 is the raw input, so pixel
differences always contribute; pretrained nets can be dropped in through the
same interface.
"""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn


class IdentityFeatureNet(nn.Module):
    """Single layer: the input itself."""

    def forward(self, x):
        return [x]


class RandomFeatureNet(nn.Module):
    """Frozen conv stack with weights drawn deterministically from `seed`.

    Returns [input, tanh(conv1), tanh(conv2), ...]; strides of 2 halve the
    resolution at each layer.
    """

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 seed: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = in_channels
        for w in widths:
            conv = nn.Conv2d(cin, w, kernel_size=3, stride=2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = [x]
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h)
        return feats


def save_feature_weights(net: nn.Module, path: str | Path) -> None:
    torch.save(net.state_dict(), path)


def load_feature_weights(net: nn.Module, path: str | Path) -> nn.Module:
    net.load_state_dict(torch.load(path, weights_only=True))
    return net
