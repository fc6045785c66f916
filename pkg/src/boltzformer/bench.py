"""Attention-compute accounting and sampling-trace statistics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .boltzmann import POLICIES, trial_count
from .errors import ConfigError
from .model import BoltzFormer
from .synthdata import ArrayDataset


@dataclass
class ComputeReport:
    policy: str
    levels: list[int]  # pyramid level per layer
    level_cells: list[int]  # N_v per layer
    queries: int
    sample_ratio: float
    pairs: np.ndarray  # (L,) attended query-key pairs summed over forwards
    n_forward: int
    seconds: float = 0.0

    @property
    def full_pairs_per_forward(self) -> np.ndarray:
        return self.queries * np.asarray(self.level_cells, dtype=np.int64)

    @property
    def cap_per_forward(self) -> np.ndarray:
        return self.queries * np.array([trial_count(self.sample_ratio, n) for n in self.level_cells], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.pairs.sum())

    @property
    def pairs_per_forward(self) -> float:
        return self.total / self.n_forward

    @property
    def reduction(self) -> float:
        """Full-attention pairs divided by this policy's pairs (per forward)."""
        return float(self.full_pairs_per_forward.sum()) / self.pairs_per_forward

    @property
    def seconds_per_forward(self) -> float:
        return self.seconds / self.n_forward


@torch.no_grad()
def compute_report(model: BoltzFormer, data: ArrayDataset, policy: str, batch_size: int = 25) -> ComputeReport:
    """Run every example of ``data`` once under ``policy`` and count attended pairs."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    model.eval()
    dcfg = model.config.decoder
    sampler = replace(dcfg.sampler, policy=policy)
    sizes = model.config.encoder.level_sizes
    levels = list(dcfg.schedule)
    pairs = np.zeros(len(levels), dtype=np.int64)
    start = time.perf_counter()
    for lo in range(0, len(data), batch_size):
        part = data.subset(np.arange(lo, min(lo + batch_size, len(data))))
        out = model(torch.from_numpy(part.images), torch.from_numpy(part.prompts),
                    example_keys=part.indices.tolist(), sampler=sampler)
        pairs += out.decoder.trace.pairs_per_layer().sum(axis=1)
    seconds = time.perf_counter() - start
    return ComputeReport(policy, levels, [sizes[l] ** 2 for l in levels], dcfg.queries, sampler.sample_ratio,
                         pairs, len(data), seconds)


def target_cells(target: np.ndarray, level_shape: tuple[int, int], dilation: int = 1) -> np.ndarray:
    """Level cells touched by the target (any pixel inside), dilated by ``dilation`` cells."""
    h, w = level_shape
    H, W = target.shape
    if H % h or W % w:
        raise ConfigError(f"target {target.shape} does not tile onto level grid {level_shape}")
    cells = target.reshape(h, H // h, w, W // w).any(axis=(1, 3))
    if dilation > 0:
        cells = binary_dilation(cells, iterations=dilation)
    return cells


def inside_fraction(sampled: np.ndarray, target: np.ndarray, dilation: int = 1) -> float:
    """Fraction of sampled level cells inside the dilated target region."""
    region = target_cells(target, sampled.shape, dilation)
    n = sampled.sum()
    return float((sampled & region).sum() / n) if n else 0.0


def cell_centroid(mask: np.ndarray) -> np.ndarray:
    """Centroid in normalized ``[0, 1]`` image coordinates (cell centres)."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    return np.array([(ys.mean() + 0.5) / h, (xs.mean() + 0.5) / w])


@dataclass
class TraceStats:
    inside: np.ndarray  # (n_examples, L) mean inside-fraction over queries
    centroid_dist: np.ndarray  # (n_examples, L) query-0 sampled centroid to target centroid
    layers: list[int] = field(default_factory=list)

    def block_means(self, block: int = 3) -> np.ndarray:
        """Mean inside-fraction over consecutive blocks of ``block`` layers."""
        per_layer = self.inside.mean(axis=0)
        n = len(per_layer) // block
        return per_layer[: n * block].reshape(n, block).mean(axis=1)


@torch.no_grad()
def trace_statistics(model: BoltzFormer, data: ArrayDataset, dilation: int = 1, batch_size: int = 25) -> TraceStats:
    """Where the sampled cells fall relative to the target, layer by layer."""
    model.eval()
    n_layers = model.config.decoder.layers
    m = model.config.decoder.queries
    inside = np.zeros((len(data), n_layers))
    dist = np.zeros((len(data), n_layers))
    for lo in range(0, len(data), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(data)))
        part = data.subset(rows)
        out = model(torch.from_numpy(part.images), torch.from_numpy(part.prompts),
                    example_keys=part.indices.tolist(), record_trace=True)
        for e in out.decoder.trace.entries:
            for b, row in enumerate(rows):
                target = part.masks[b]
                inside[row, e.layer] += inside_fraction(e.mask[b], target, dilation) / m
                if e.query == 0:
                    t_c = cell_centroid(target)
                    dist[row, e.layer] = float(np.linalg.norm(cell_centroid(e.mask[b]) - t_c))
    return TraceStats(inside, dist, list(range(n_layers)))
