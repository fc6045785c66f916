"""Boltzmann attention sampling.

Each query scores every semantic-map pixel with ``sigmoid(mu . S_xy)``; the
scores are turned into a Boltzmann distribution at the layer temperature
``tau0 / (1 + layer)``, interpolated onto the attended level's grid, and an
attention set is drawn by independent per-cell Bernoulli trials with
inclusion probability ``1 - (1 - p)^N``.

Sampling is not differentiable; callers treat the resulting sets as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericalError
from .grid import SpatialField, bilinear_resample, renormalize_probability, resample_planes

POLICIES = ("boltzmann", "full", "threshold")


@dataclass(frozen=True)
class SamplerConfig:
    tau0: float = 1.0
    sample_ratio: float = 0.10
    policy: str = "boltzmann"
    threshold_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ConfigError(f"tau0 must be > 0, got {self.tau0}")
        if not 0 < self.sample_ratio <= 1:
            raise ConfigError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if not 0 < self.threshold_value < 1:
            raise ConfigError(f"threshold_value must be in (0, 1), got {self.threshold_value}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown sampling policy {self.policy!r}; expected one of {POLICIES}")

    def n_trials(self, n_cells: int) -> int:
        return trial_count(self.sample_ratio, n_cells)


@dataclass(frozen=True)
class BoltzmannField:
    probabilities: SpatialField
    temperature: float

    def __post_init__(self):
        data = self.probabilities.data
        if np.any(data < 0) or abs(data.sum() - 1.0) > 1e-9:
            raise NumericalError("Boltzmann field is not a normalized distribution")


@dataclass(frozen=True)
class AttentionSet:
    level_height: int
    level_width: int
    indices: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.indices)

    def flat_indices(self) -> np.ndarray:
        return np.array([y * self.level_width + x for y, x in self.indices], dtype=np.int64)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.level_height * self.level_width, dtype=bool)
        out[self.flat_indices()] = True
        return out.reshape(self.level_height, self.level_width)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "AttentionSet":
        h, w = mask.shape
        ys, xs = np.nonzero(mask)
        return cls(h, w, tuple(zip(ys.tolist(), xs.tolist())))


def trial_count(ratio: float, n_cells: int) -> int:
    """Number of Bernoulli-approximated trials ``N`` for a level of ``n_cells``."""
    # Guard against 0.1 * 10 = 1.0000000000000002 rounding up.
    return max(1, math.ceil(ratio * n_cells - 1e-9))


def temperature_at(tau0: float, layer: int) -> float:
    return tau0 / (1 + layer)


def confidence_map(mu: np.ndarray, semantic: SpatialField) -> SpatialField:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 1 or mu.shape[0] != semantic.channels:
        raise ConfigError(f"mu has shape {mu.shape}, semantic map has {semantic.channels} channels")
    return SpatialField(expit(semantic.data @ mu))


def boltzmann_probabilities(confidence: np.ndarray, tau: float) -> np.ndarray:
    """Batched Boltzmann distribution over the last two axes of ``confidence``."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    u = np.asarray(confidence, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise NumericalError("non-finite confidence values")
    z = u / tau
    z = z - z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=(-2, -1), keepdims=True)
    if not np.all(np.isfinite(p)):
        raise NumericalError("non-finite Boltzmann probabilities")
    return p


def boltzmann_distribution(confidence: SpatialField, tau: float) -> BoltzmannField:
    if confidence.channels != 1:
        raise ConfigError("confidence map must have one channel")
    return BoltzmannField(SpatialField(boltzmann_probabilities(confidence.plane(0), tau)), float(tau))


def resample_probabilities(p: np.ndarray, height: int, width: int) -> np.ndarray:
    """Interpolate batched distributions onto a ``height x width`` grid and renormalize."""
    if p.shape[-2:] != (height, width):
        p = resample_planes(p, height, width)
    total = p.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0):
        raise NumericalError("resampled distribution lost all mass")
    return p / total


def resample_field(field: BoltzmannField, height: int, width: int) -> BoltzmannField:
    probs = renormalize_probability(bilinear_resample(field.probabilities, height, width))
    return BoltzmannField(probs, field.temperature)


def inclusion_probability(p: np.ndarray, n_trials: int) -> np.ndarray:
    """``1 - (1 - p)^N`` evaluated without cancellation for small ``p``."""
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        return -np.expm1(n_trials * np.log1p(-p))


def bernoulli_trials(p: np.ndarray, n_trials: int, uniforms: np.ndarray) -> np.ndarray:
    """Independent per-cell draws: keep a cell when its uniform is below ``1 - (1 - p)^N``."""
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    return uniforms < inclusion_probability(p, n_trials)


def sample_masks(p: np.ndarray, n_trials: int, uniforms: np.ndarray) -> np.ndarray:
    """Core sampler over flattened cells: ``p`` and ``uniforms`` are ``(..., G)``.

    Runs :func:`bernoulli_trials`, then repairs the two cases the
    approximation leaves open: empty rows fall back to the argmax cell, and
    rows with more than ``N`` cells keep the ``N`` most probable ones (ties
    broken by lower index).
    """
    keep = bernoulli_trials(p, n_trials, uniforms)
    flat_keep = keep.reshape(-1, keep.shape[-1])
    flat_p = p.reshape(-1, p.shape[-1])
    counts = flat_keep.sum(axis=1)
    for r in np.nonzero(counts == 0)[0]:
        flat_keep[r, np.argmax(flat_p[r])] = True
    for r in np.nonzero(counts > n_trials)[0]:
        cand = np.nonzero(flat_keep[r])[0]
        order = np.argsort(-flat_p[r, cand], kind="stable")
        flat_keep[r] = False
        flat_keep[r, cand[order[:n_trials]]] = True
    return flat_keep.reshape(keep.shape)


def sample_attention_set(field: BoltzmannField, n_trials: int, rng: np.random.Generator) -> AttentionSet:
    p = field.probabilities.plane(0)
    h, w = p.shape
    u = rng.random(h * w)
    keep = sample_masks(p.reshape(-1), n_trials, u)
    return AttentionSet.from_mask(keep.reshape(h, w))


def multinomial_attention_set(field: BoltzmannField, n_trials: int, rng: np.random.Generator) -> AttentionSet:
    """Exact scheme: union of ``N`` with-replacement draws. Reference only."""
    p = field.probabilities.plane(0)
    h, w = p.shape
    draws = rng.choice(h * w, size=n_trials, replace=True, p=p.reshape(-1))
    keep = np.zeros(h * w, dtype=bool)
    keep[draws] = True
    return AttentionSet.from_mask(keep.reshape(h, w))


def threshold_masks(logits: np.ndarray, threshold: float) -> np.ndarray:
    """``(..., G)`` logits to keep-masks; empty rows fall back to all cells."""
    keep = expit(logits) >= threshold
    empty = ~keep.any(axis=-1)
    keep[empty] = True
    return keep


def baseline_attention_set(
    policy: str,
    previous_mask: SpatialField | None,
    level_height: int,
    level_width: int,
    threshold_value: float = 0.5,
) -> AttentionSet:
    """Full attention, or Mask2Former-style hard thresholding of the previous mask.

    ``previous_mask`` holds logits; it is bilinearly resampled to the level
    grid first. With no previous mask the threshold policy attends everywhere.
    """
    if policy == "full" or (policy == "threshold" and previous_mask is None):
        return AttentionSet.from_mask(np.ones((level_height, level_width), dtype=bool))
    if policy != "threshold":
        raise ConfigError(f"baseline policy must be 'full' or 'threshold', got {policy!r}")
    logits = resample_planes(previous_mask.plane(0), level_height, level_width)
    keep = threshold_masks(logits.reshape(-1), threshold_value)
    return AttentionSet.from_mask(keep.reshape(level_height, level_width))


def level_attention_masks(
    policy: str,
    probs: np.ndarray | None,
    n_trials: int,
    uniforms: np.ndarray | None,
    previous_logits: np.ndarray | None,
    threshold_value: float,
    level_shape: tuple[int, int],
    batch_shape: Sequence[int],
) -> np.ndarray:
    """Keep-masks ``(*batch_shape, h*w)`` for one layer under any policy."""
    h, w = level_shape
    g = h * w
    if policy == "boltzmann":
        return sample_masks(probs.reshape(*batch_shape, g), n_trials, uniforms.reshape(*batch_shape, g))
    if policy == "full" or previous_logits is None:
        return np.ones((*batch_shape, g), dtype=bool)
    logits = resample_planes(previous_logits, h, w).reshape(*batch_shape, g)
    return threshold_masks(logits, threshold_value)
