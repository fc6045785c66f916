"""Masked multi-head cross-attention and the joint query/text self-attention block."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .boltzmann import AttentionSet
from .errors import ConfigError
from .grid import SpatialField
from .nn_core import DTYPE, MLP, LayerNorm, masked_softmax, weight_param


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


class CrossAttention(nn.Module):
    """Queries attend to level features restricted to their attention sets.

    Scores are ``(W^Q_j q) . (W^K_j v) / d`` with ``d`` the model width; pass
    ``scale="sqrt_d"`` for the conventional ``sqrt(d / heads)`` divisor.
    The residual ``q + [H_1..H_h] W^O`` is included.
    """

    def __init__(self, dim: int, heads: int, scale: str = "d"):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model width {dim} not divisible by {heads} heads")
        if scale not in ("d", "sqrt_d"):
            raise ConfigError(f"unknown attention scale {scale!r}")
        self.dim, self.heads = dim, heads
        self.divisor = float(dim) if scale == "d" else math.sqrt(dim // heads)
        self.w_q = weight_param(dim, dim, fan_in=dim)
        self.w_k = weight_param(dim, dim, fan_in=dim)
        self.w_v = weight_param(dim, dim, fan_in=dim)
        self.w_o = weight_param(dim, dim, fan_in=dim)

    def project_keys(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head keys and values for ``(B, N, d)`` features."""
        return _split_heads(feats @ self.w_k, self.heads), _split_heads(feats @ self.w_v, self.heads)

    def forward(self, q: Tensor, feats: Tensor, mask: Tensor | None = None, keys=None,
                return_weights: bool = False):
        # q: (B, m, d); feats: (B, N, d); mask: (B, m, N) bool
        k, v = keys if keys is not None else self.project_keys(feats)
        qh = _split_heads(q @ self.w_q, self.heads)  # (B, h, m, dh)
        scores = qh @ k.transpose(-2, -1) / self.divisor  # (B, h, m, N)
        attn = masked_softmax(scores, None if mask is None else mask.unsqueeze(1))
        out = q + _merge_heads(attn @ v) @ self.w_o
        return (out, attn) if return_weights else out


class SelfAttention(nn.Module):
    """Unmasked multi-head self-attention, standard ``sqrt(d_head)`` scaling."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.divisor = math.sqrt(dim // heads)
        self.w_q = weight_param(dim, dim, fan_in=dim)
        self.w_k = weight_param(dim, dim, fan_in=dim)
        self.w_v = weight_param(dim, dim, fan_in=dim)
        self.w_o = weight_param(dim, dim, fan_in=dim)

    def forward(self, x: Tensor) -> Tensor:
        q = _split_heads(x @ self.w_q, self.heads)
        k = _split_heads(x @ self.w_k, self.heads)
        v = _split_heads(x @ self.w_v, self.heads)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.divisor, dim=-1)
        return _merge_heads(attn @ v) @ self.w_o


class JointSelfAttentionBlock(nn.Module):
    """``FFN(LayerNorm([Q, T] + SelfAttn[Q, T]))`` with only the Q rows passing the FFN.

    Text rows leave normalized (``update_text=True``) or are handed back
    unchanged.
    """

    def __init__(self, dim: int, heads: int, ffn_hidden: int | None = None, update_text: bool = True):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.norm = LayerNorm(dim)
        self.ffn = MLP(dim, hidden=ffn_hidden)
        self.update_text = update_text

    def forward(self, queries: Tensor, text: Tensor) -> tuple[Tensor, Tensor]:
        m = queries.shape[-2]
        x = torch.cat([queries, text], dim=-2)
        x = self.norm(x + self.attn(x))
        new_q = self.ffn(x[..., :m, :])
        new_t = x[..., m:, :] if self.update_text else text
        return new_q, new_t


def ensemble_layer_norm(queries: Tensor, norm: LayerNorm) -> Tensor:
    return norm(queries)


def masked_cross_attention(q: Tensor, level: SpatialField, attention_set: AttentionSet,
                           params: CrossAttention) -> Tensor:
    """Single-query convenience wrapper around :class:`CrossAttention`."""
    if len(attention_set) == 0:
        raise ConfigError("masked_cross_attention needs a nonempty attention set")
    if level.channels != params.dim:
        raise ConfigError(f"level has {level.channels} channels, attention expects {params.dim}")
    feats = torch.tensor(level.data, dtype=DTYPE).reshape(1, -1, level.channels)
    mask = torch.as_tensor(attention_set.mask().reshape(1, 1, -1))
    return params(q.reshape(1, 1, -1), feats, mask)[0, 0]
