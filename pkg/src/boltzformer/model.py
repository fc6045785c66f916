"""End-to-end segmenter: encoder -> prompt tokens -> decoder -> PiGMA."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .boltzmann import SamplerConfig
from .decoder import BoltzDecoder, DecoderConfig, DecoderOutput
from .encoder import ConvEncoder, EncoderConfig
from .errors import ConfigError
from .nn_core import DTYPE, ParamStore, reset_parameters
from .pigma import PiGMA
from .synthdata import PromptTable


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    n_classes: int = 4
    prompt_tokens: int = 4
    pigma_hidden: int = 16
    pigma_correction: bool = True
    pigma_input: str = "logits"
    init_seed: int = 0

    def __post_init__(self):
        if self.encoder.dim != self.decoder.dim:
            raise ConfigError(f"encoder dim {self.encoder.dim} != decoder dim {self.decoder.dim}")
        if max(self.decoder.schedule) >= len(self.encoder.level_sizes):
            raise ConfigError("decoder schedule references a missing pyramid level")
        if self.prompt_tokens < 0:
            raise ConfigError("prompt_tokens must be >= 0")

    @property
    def output_size(self) -> int:
        return 4 * self.encoder.semantic_size

    def with_sampler(self, **changes) -> "ModelConfig":
        return replace(self, decoder=replace(self.decoder, sampler=replace(self.decoder.sampler, **changes)))


@dataclass
class ModelOutput:
    probabilities: Tensor  # (B, 4Hs, 4Ws)
    decoder: DecoderOutput


class BoltzFormer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.decoder.dim
        self.encoder = ConvEncoder(config.encoder)
        self.prompts = PromptTable(config.n_classes, config.prompt_tokens, d)
        self.decoder = BoltzDecoder(config.decoder)
        self.pigma = PiGMA(config.decoder.queries, config.encoder.in_channels, config.pigma_hidden,
                           correction=config.pigma_correction, correction_input=config.pigma_input)
        reset_parameters(self, config.init_seed)

    def forward(
        self,
        images: Tensor,
        prompt_ids: Tensor,
        example_keys: Sequence[int] | None = None,
        record_trace: bool = False,
        attention_masks: Sequence[Tensor | None] | None = None,
        sampler: SamplerConfig | None = None,
    ) -> ModelOutput:
        images = images.to(DTYPE)
        pyramid = self.encoder(images)
        text = self.prompts(prompt_ids)
        dec = self.decoder(pyramid, text, example_keys=example_keys, record_trace=record_trace,
                           attention_masks=attention_masks, sampler=sampler)
        return ModelOutput(self.pigma(dec.logits, images), dec)

    def params(self) -> ParamStore:
        return ParamStore(self)


def build_model(config: ModelConfig | None = None) -> BoltzFormer:
    return BoltzFormer(config or ModelConfig())


def as_batch(images: np.ndarray, prompts: np.ndarray) -> tuple[Tensor, Tensor]:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64)), torch.from_numpy(prompts)
