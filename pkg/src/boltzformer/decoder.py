"""The query decoder: text-conditioned prior, sampled cross-attention layers, mask heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import Tensor, nn

from .attention import CrossAttention, JointSelfAttentionBlock, ensemble_layer_norm
from .boltzmann import (
    SamplerConfig,
    boltzmann_probabilities,
    level_attention_masks,
    resample_probabilities,
    temperature_at,
    trial_count,
)
from .errors import ConfigError
from .grid import FeaturePyramid, SpatialField
from .nn_core import DTYPE, MLP, LayerNorm, weight_param
from .rng import layer_uniforms


def default_schedule(n_levels: int = 3, repeats: int = 3) -> tuple[int, ...]:
    return tuple(i for _ in range(repeats) for i in range(n_levels))


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 9
    queries: int = 10
    dim: int = 64
    heads: int = 8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: tuple[int, ...] = field(default_factory=default_schedule)
    mlp_depth: int = 2
    text_prior: bool = True
    update_text: bool = True
    attn_scale: str = "d"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if self.layers != len(self.schedule):
            raise ConfigError(f"{self.layers} layers but schedule has {len(self.schedule)} entries")
        if self.queries < 1:
            raise ConfigError("need at least one query")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")


@dataclass
class TraceEntry:
    layer: int
    query: int
    level: int
    temperature: float
    level_shape: tuple[int, int]
    pairs: np.ndarray  # (B,) attended cells for this query
    mask: np.ndarray | None = None  # (B, h, w) bool
    probabilities: np.ndarray | None = None  # (B, h, w), boltzmann policy only

    def boltzmann_field(self, b: int = 0) -> SpatialField | None:
        return None if self.probabilities is None else SpatialField(self.probabilities[b])


@dataclass
class SamplingTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def temperatures(self) -> list[float]:
        return [e.temperature for e in self.entries if e.query == 0]

    def pairs_per_layer(self) -> np.ndarray:
        """``(L, B)`` attended query-key pairs summed over queries."""
        n_layers = max(e.layer for e in self.entries) + 1
        out = np.zeros((n_layers, len(self.entries[0].pairs)), dtype=np.int64)
        for e in self.entries:
            out[e.layer] += e.pairs
        return out

    def for_query(self, query: int) -> list[TraceEntry]:
        return [e for e in self.entries if e.query == query]


@dataclass
class DecoderOutput:
    logits: Tensor  # (B, m, Hs, Ws)
    queries: Tensor  # (B, m, d)
    trace: SamplingTrace
    masks: list[Tensor | None]  # per layer (B, m, N) bool, None for dense layers


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cross = CrossAttention(cfg.dim, cfg.heads, scale=cfg.attn_scale)
        self.cross_norm = LayerNorm(cfg.dim)
        self.joint = JointSelfAttentionBlock(cfg.dim, cfg.heads, update_text=cfg.update_text)


def mask_logits(mu: Tensor, semantic: Tensor) -> Tensor:
    """``mu . S_xy`` for ``mu`` ``(B, m, d)`` and ``S`` ``(B, H, W, d)`` -> ``(B, m, H, W)``."""
    return torch.einsum("bmd,byxd->bmyx", mu, semantic)


class BoltzDecoder(nn.Module):
    """``L`` layers of (sample -> cross-attend -> normalize -> joint self-attend).

    The same ``mask_mlp`` maps queries to ``mu`` for sampling and for the
    final mask logits.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = weight_param(cfg.queries, cfg.dim, fan_in=cfg.dim)
        self.mask_mlp = MLP(cfg.dim, depth=cfg.mlp_depth)
        self.prior = JointSelfAttentionBlock(cfg.dim, cfg.heads, update_text=cfg.update_text)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))

    def initial_queries(self, text: Tensor) -> tuple[Tensor, Tensor]:
        q = self.queries.expand(text.shape[0], -1, -1)
        if not self.cfg.text_prior:
            return q, text
        return self.prior(q, text)

    def forward(
        self,
        pyramid: FeaturePyramid,
        text: Tensor,
        example_keys: Sequence[int] | None = None,
        record_trace: bool = False,
        attention_masks: Sequence[Tensor | None] | None = None,
        sampler: SamplerConfig | None = None,
    ) -> DecoderOutput:
        """Run the decoder on a batch.

        ``example_keys`` pick each example's random stream (default: batch
        position). ``attention_masks`` replays previously drawn sets, which
        freezes the non-differentiable selection step.
        """
        cfg = self.cfg
        sampler = sampler or cfg.sampler
        semantic = pyramid.semantic
        batch = semantic.shape[0]
        if max(cfg.schedule) >= len(pyramid.levels):
            raise ConfigError(f"schedule uses level {max(cfg.schedule)} but pyramid has {len(pyramid.levels)}")
        keys = list(range(batch)) if example_keys is None else list(example_keys)
        if len(keys) != batch:
            raise ConfigError("one example key per batch element required")

        q, text = self.initial_queries(text)
        m = q.shape[1]
        trace = SamplingTrace()
        used_masks: list[Tensor | None] = []
        for ell, (layer, lvl) in enumerate(zip(self.layers, cfg.schedule)):
            feats = pyramid.levels[lvl][1]
            h, w = feats.shape[1], feats.shape[2]
            n_cells = h * w
            tau = temperature_at(sampler.tau0, ell)
            probs = None
            if attention_masks is not None:
                mask = attention_masks[ell]
            elif sampler.policy == "full":
                mask = None
            else:
                with torch.no_grad():
                    logits = mask_logits(self.mask_mlp(q), semantic).numpy()
                if sampler.policy == "boltzmann":
                    confidence = expit(logits)
                    probs = resample_probabilities(boltzmann_probabilities(confidence, tau), h, w)
                    uniforms = layer_uniforms(sampler.seed, keys, ell, m, n_cells)
                    keep = level_attention_masks("boltzmann", probs, trial_count(sampler.sample_ratio, n_cells),
                                                 uniforms, None, sampler.threshold_value, (h, w), (batch, m))
                else:
                    keep = level_attention_masks("threshold", None, 0, None, logits if ell > 0 else None,
                                                 sampler.threshold_value, (h, w), (batch, m))
                mask = torch.from_numpy(keep)
            used_masks.append(mask)

            q = layer.cross(q, feats.reshape(batch, n_cells, -1), mask)
            q = ensemble_layer_norm(q, layer.cross_norm)
            q, text = layer.joint(q, text)

            pairs = np.full((batch, m), n_cells, dtype=np.int64) if mask is None else mask.sum(-1).numpy()
            for i in range(m):
                entry = TraceEntry(ell, i, lvl, tau, (h, w), pairs[:, i])
                if record_trace:
                    entry.mask = (np.ones((batch, h, w), dtype=bool) if mask is None
                                  else mask[:, i].numpy().reshape(batch, h, w))
                    if probs is not None:
                        entry.probabilities = probs[:, i]
                trace.entries.append(entry)

        logits = mask_logits(self.mask_mlp(q), semantic)
        return DecoderOutput(logits, q, trace, used_masks)


def init_text_conditioned(learned_queries: Tensor, text: Tensor, block: JointSelfAttentionBlock) -> Tensor:
    return block(learned_queries, text)[0]


def per_query_mask(q: Tensor, semantic: SpatialField, mlp: MLP) -> SpatialField:
    s = torch.tensor(semantic.data, dtype=DTYPE)
    with torch.no_grad():
        logits = s @ mlp(q)
    return SpatialField(logits.numpy())


def decoder_forward(pyramid: FeaturePyramid, text: Tensor, decoder: BoltzDecoder,
                    example_keys: Sequence[int] | None = None, record_trace: bool = True) -> DecoderOutput:
    return decoder(pyramid, text, example_keys=example_keys, record_trace=record_trace)
