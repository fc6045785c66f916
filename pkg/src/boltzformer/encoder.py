"""Small convolutional pyramid standing in for a pretrained backbone + pixel decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError
from .grid import FeaturePyramid, interp_matrix
from .nn_core import DTYPE, Linear, bias_param, weight_param


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    in_channels: int = 1
    dim: int = 64
    level_sizes: tuple[int, ...] = (8, 16, 32)
    semantic_size: int = 32

    def __post_init__(self):
        sizes = tuple(self.level_sizes)
        object.__setattr__(self, "level_sizes", sizes)
        if not sizes or any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"level sizes must strictly increase, got {sizes}")
        if self.semantic_size != sizes[-1]:
            raise ConfigError("semantic map size must equal the finest level size")
        for s in sizes:
            ratio = self.input_size / s
            if ratio < 2 or ratio != 2 ** round(math.log2(ratio)):
                raise ConfigError(f"level size {s} is not input_size / 2^k (k >= 1)")
        if self.dim < 2:
            raise ConfigError("feature dim must be >= 2")

    def strides(self) -> list[int]:
        return [self.input_size // s for s in self.level_sizes]


class Conv2d(nn.Module):
    def __init__(self, n_in: int, n_out: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.weight = weight_param(n_out, n_in, kernel, kernel, fan_in=n_in * kernel * kernel)
        self.bias = bias_param(n_out)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


@lru_cache(maxsize=64)
def interp_tensor(n_in: int, n_out: int) -> Tensor:
    return torch.tensor(interp_matrix(n_in, n_out), dtype=DTYPE)


def upsample(x: Tensor, height: int, width: int) -> Tensor:
    """Corner-aligned bilinear resize of channel-last ``(B, h, w, c)`` tensors."""
    ry = interp_tensor(x.shape[-3], height)
    rx = interp_tensor(x.shape[-2], width)
    return torch.einsum("yh,bhwc,xw->byxc", ry, x, rx)


def resize_planes(x: Tensor, height: int, width: int) -> Tensor:
    """Corner-aligned bilinear resize over the last two axes (``..., h, w``)."""
    if x.shape[-2:] == (height, width):
        return x
    ry = interp_tensor(x.shape[-2], height)
    rx = interp_tensor(x.shape[-1], width)
    return ry @ x @ rx.T


class ConvEncoder(nn.Module):
    """Strided 3x3 GELU stages, a top-down merge, and a 3x3 semantic head.

    Stage ``k`` halves the resolution; the stages whose output size appears in
    ``level_sizes`` feed the pyramid. Coarser levels are upsampled and added to
    1x1 projections of finer stages, as in a feature pyramid network.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        n_stages = round(math.log2(config.input_size / config.level_sizes[0]))
        chans = [config.in_channels] + [d] * n_stages
        self.stages = nn.ModuleList(Conv2d(a, b, 3, stride=2) for a, b in zip(chans, chans[1:]))
        self.laterals = nn.ModuleList(Linear(d, d) for _ in config.level_sizes[1:])
        self.semantic_head = Conv2d(d, d, 3)

    def forward(self, image: Tensor) -> FeaturePyramid:
        """``image`` is ``(B, H, W, C)``; returns channel-last features."""
        cfg = self.config
        if image.dim() != 4 or image.shape[1:] != (cfg.input_size, cfg.input_size, cfg.in_channels):
            raise ConfigError(
                f"encoder expects (B, {cfg.input_size}, {cfg.input_size}, {cfg.in_channels}), got {tuple(image.shape)}"
            )
        x = image.permute(0, 3, 1, 2)
        by_size: dict[int, Tensor] = {}
        for stage in self.stages:
            x = F.gelu(stage(x))
            by_size[x.shape[-1]] = x.permute(0, 2, 3, 1)
        top = by_size[cfg.level_sizes[0]]
        levels = [top]
        for lateral, size in zip(self.laterals, cfg.level_sizes[1:]):
            top = lateral(by_size[size]) + upsample(top, size, size)
            levels.append(top)
        semantic = self.semantic_head(top.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return FeaturePyramid(list(zip(cfg.strides(), levels)), semantic)


def encode(image: Tensor, encoder: ConvEncoder) -> FeaturePyramid:
    if image.dtype != DTYPE:
        image = image.to(DTYPE)
    return encoder(image)
