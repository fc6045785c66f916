"""Pixel-grounded mask aggregation.

Final probability = ``sigmoid((upsampled ensemble mean + correction) / 2)``
where the correction is two image-conditioned transposed convolutions over
the channel-stacked per-query logits.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import resize_planes
from .errors import ConfigError
from .nn_core import bias_param, weight_param


class ConvTranspose2d(nn.Module):
    """Kernel-4 stride-2 transposed convolution: exact 2x upsampling."""

    def __init__(self, n_in: int, n_out: int, kernel: int = 4, stride: int = 2):
        super().__init__()
        # each output pixel receives n_in * (kernel / stride)^2 taps
        self.weight = weight_param(n_in, n_out, kernel, kernel, fan_in=n_in * (kernel // stride) ** 2)
        self.bias = bias_param(n_out)
        self.stride = stride
        self.padding = (kernel - stride) // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class PiGMA(nn.Module):
    def __init__(self, queries: int, image_channels: int = 1, hidden: int = 16,
                 correction: bool = True, correction_input: str = "logits"):
        super().__init__()
        if correction_input not in ("logits", "probabilities"):
            raise ConfigError(f"unknown correction input {correction_input!r}")
        self.queries = queries
        self.image_channels = image_channels
        self.correction = correction
        self.correction_input = correction_input
        self.up1 = ConvTranspose2d(queries + image_channels, hidden)
        self.up2 = ConvTranspose2d(hidden + image_channels, 1)

    def ensemble_mean(self, logits: Tensor) -> Tensor:
        return ensemble_mean(logits)

    def pixel_correction(self, logits: Tensor, image: Tensor) -> Tensor:
        """``logits`` ``(B, m, h, w)``, ``image`` ``(B, H, W, C)`` -> ``(B, 4h, 4w)``."""
        if logits.shape[1] != self.queries:
            raise ConfigError(f"PiGMA built for {self.queries} queries, got {logits.shape[1]}")
        if image.shape[-1] != self.image_channels:
            raise ConfigError(f"PiGMA expects {self.image_channels} image channels, got {image.shape[-1]}")
        h, w = logits.shape[-2:]
        img = image.permute(0, 3, 1, 2)
        x = logits if self.correction_input == "logits" else torch.sigmoid(logits)
        x = torch.cat([x, resize_planes(img, h, w)], dim=1)
        x = F.gelu(self.up1(x))
        x = torch.cat([x, resize_planes(img, 2 * h, 2 * w)], dim=1)
        return self.up2(x)[:, 0]

    def combined_logits(self, logits: Tensor, image: Tensor) -> Tensor:
        mean = self.ensemble_mean(logits)
        if not self.correction:
            return mean
        return (mean + self.pixel_correction(logits, image)) / 2

    def forward(self, logits: Tensor, image: Tensor) -> Tensor:
        return torch.sigmoid(self.combined_logits(logits, image))


def ensemble_mean(logits: Tensor) -> Tensor:
    """``(B, m, h, w)`` -> ``(B, 4h, 4w)`` mean logit, bilinearly upsampled."""
    if logits.shape[1] == 0:
        raise ConfigError("ensemble_mean needs at least one prediction")
    h, w = logits.shape[-2:]
    return resize_planes(logits.mean(dim=1), 4 * h, 4 * w)


def pigma_aggregate(logits: Tensor, image: Tensor, module: PiGMA) -> Tensor:
    return module(logits, image)
