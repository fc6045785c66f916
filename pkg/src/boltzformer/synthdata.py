"""Deterministic synthetic small-object corpus.

Every example is a pure function of ``(config, index)``: one prompted target
of a random class (shape x intensity), up to three distractors drawn from the
other classes, and additive Gaussian noise. Target areas are log-uniform, so
most targets cover well under 1% of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError
from .grid import SpatialField, read_pbm, read_pgm, write_pbm, write_pgm
from .nn_core import weight_param
from .rng import substream

SPLITS = {"train": (0, 8000), "val": (8000, 9000), "test": (9000, 10000)}
SHAPES = ("ellipse", "rectangle")
_STREAM_TAG = 0x5EED


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    area_min: float = 2e-5
    area_max: float = 0.2
    max_distractors: int = 3
    noise: float = 0.05
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.area_min <= self.area_max < 1:
            raise ConfigError(f"area range must satisfy 0 < min <= max < 1, got ({self.area_min}, {self.area_max})")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if self.n_classes < 1 or self.max_distractors < 0 or self.noise < 0:
            raise ConfigError("n_classes >= 1, max_distractors >= 0 and noise >= 0 required")

    def class_shape(self, cls: int) -> str:
        return SHAPES[cls % 2]

    def class_intensity(self, cls: int) -> float:
        if self.n_classes == 1:
            return 1.0
        return 1.0 - 0.6 * cls / (self.n_classes - 1)


@dataclass(frozen=True)
class Example:
    index: int
    image: SpatialField
    mask: SpatialField
    prompt_id: int
    area_ratio: float
    sampled_ratio: float
    floored: bool = False

    @property
    def small(self) -> bool:
        return self.area_ratio < 0.01


def _shape_mask(rng: np.random.Generator, size: int, n_pixels: int, shape: str) -> np.ndarray:
    """Exactly ``n_pixels`` cells: the ones closest to a random centre in the shape's norm."""
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    theta = rng.uniform(0.0, math.pi)
    if shape == "ellipse":
        a = math.sqrt(n_pixels * aspect / math.pi)
        b = math.sqrt(n_pixels / (aspect * math.pi))
        reach = max(a, b)
    else:
        a = math.sqrt(n_pixels * aspect) / 2
        b = math.sqrt(n_pixels / aspect) / 2
        reach = math.hypot(a, b)
    lo = min(reach, (size - 1) / 2)
    cy, cx = rng.uniform(lo, size - 1 - lo, size=2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = ys - cy, xs - cx
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    if shape == "ellipse":
        dist = (u / a) ** 2 + (v / b) ** 2
    else:
        dist = np.maximum(np.abs(u) / a, np.abs(v) / b)
    order = np.argsort(dist.reshape(-1), kind="stable")
    out = np.zeros(size * size, dtype=bool)
    out[order[:n_pixels]] = True
    return out.reshape(size, size)


def _area_pixels(rng: np.random.Generator, cfg: SceneConfig) -> tuple[float, int, bool]:
    total = cfg.image_size**2
    ratio = math.exp(rng.uniform(math.log(cfg.area_min), math.log(cfg.area_max)))
    n = max(1, round(ratio * total))
    # below ~2.5 pixels the +-20% band is not reachable on the grid
    floored = abs(n / (ratio * total) - 1) > 0.2
    return ratio, n, floored


def generate_one(cfg: SceneConfig, index: int) -> Example:
    rng = substream(cfg.seed, _STREAM_TAG, index)
    size = cfg.image_size
    target_cls = int(rng.integers(cfg.n_classes))
    ratio, n_px, floored = _area_pixels(rng, cfg)
    target = _shape_mask(rng, size, n_px, cfg.class_shape(target_cls))

    image = np.zeros((size, size))
    others = [c for c in range(cfg.n_classes) if c != target_cls]
    n_distract = int(rng.integers(cfg.max_distractors + 1)) if others else 0
    placed = 0
    attempts = 0
    while placed < n_distract and attempts < 20 * max(n_distract, 1):
        attempts += 1
        cls = others[int(rng.integers(len(others)))]
        _, n_d, _ = _area_pixels(rng, cfg)
        blob = _shape_mask(rng, size, n_d, cfg.class_shape(cls))
        if (blob & target).sum() > 0.3 * n_px:
            continue
        image[blob] = cfg.class_intensity(cls)
        placed += 1
    image[target] = cfg.class_intensity(target_cls)
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return Example(
        index=index,
        image=SpatialField(image),
        mask=SpatialField(target.astype(np.float64)),
        prompt_id=target_cls,
        area_ratio=n_px / size**2,
        sampled_ratio=ratio,
        floored=floored,
    )


def generate(cfg: SceneConfig, count: int, start: int = 0) -> list[Example]:
    if count < 1:
        raise ConfigError("count must be >= 1")
    return [generate_one(cfg, i) for i in range(start, start + count)]


@dataclass
class ArrayDataset:
    """Stacked examples for batched training/evaluation."""

    indices: np.ndarray  # (n,) example indices; also the sampling stream keys
    images: np.ndarray  # (n, H, W, 1)
    masks: np.ndarray  # (n, H, W) bool
    prompts: np.ndarray  # (n,)
    areas: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, rows: Sequence[int] | np.ndarray) -> "ArrayDataset":
        rows = np.asarray(rows)
        return ArrayDataset(self.indices[rows], self.images[rows], self.masks[rows],
                            self.prompts[rows], self.areas[rows])


def to_arrays(examples: Iterable[Example]) -> ArrayDataset:
    examples = list(examples)
    return ArrayDataset(
        indices=np.array([e.index for e in examples], dtype=np.int64),
        images=np.stack([e.image.data for e in examples]),
        masks=np.stack([e.mask.plane(0) > 0.5 for e in examples]),
        prompts=np.array([e.prompt_id for e in examples], dtype=np.int64),
        areas=np.array([e.area_ratio for e in examples]),
    )


def split_dataset(cfg: SceneConfig, split: str, limit: int | None = None) -> ArrayDataset:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {tuple(SPLITS)}")
    lo, hi = SPLITS[split]
    if limit is not None:
        hi = min(hi, lo + limit)
    return to_arrays(generate_one(cfg, i) for i in range(lo, hi))


class PromptTable(nn.Module):
    """Learned ``N_T x d`` token sequence per prompt class."""

    def __init__(self, n_classes: int, tokens: int, dim: int):
        super().__init__()
        self.table = weight_param(n_classes, tokens, dim, fan_in=dim)

    def forward(self, ids: Tensor) -> Tensor:
        if bool((ids < 0).any()) or bool((ids >= self.table.shape[0]).any()):
            raise ConfigError(f"prompt id out of range [0, {self.table.shape[0]})")
        return self.table[ids]


def prompt_embedding(prompt_id: int, table: PromptTable) -> Tensor:
    return table(torch.tensor([prompt_id]))[0]


# --- on-disk cache -----------------------------------------------------------


def write_example(directory: str | Path, example: Example) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"example_{example.index:05d}"
    write_pgm(stem.with_suffix(".pgm"), example.image)
    write_pbm(stem.with_suffix(".pbm"), example.mask.plane(0) > 0.5)
    stem.with_suffix(".meta").write_text(
        f"prompt_id = {example.prompt_id}\narea_ratio = {example.area_ratio!r}\n"
        f"sampled_ratio = {example.sampled_ratio!r}\nfloored = {int(example.floored)}\n"
    )
    return stem


def read_example(stem: str | Path) -> Example:
    stem = Path(stem)
    meta = dict(line.split(" = ", 1) for line in stem.with_suffix(".meta").read_text().splitlines())
    return Example(
        index=int(stem.name.rsplit("_", 1)[1]),
        image=read_pgm(stem.with_suffix(".pgm")),
        mask=SpatialField(read_pbm(stem.with_suffix(".pbm")).astype(np.float64)),
        prompt_id=int(meta["prompt_id"]),
        area_ratio=float(meta["area_ratio"]),
        sampled_ratio=float(meta["sampled_ratio"]),
        floored=bool(int(meta["floored"])),
    )
