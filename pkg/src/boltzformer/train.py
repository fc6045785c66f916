"""Losses, augmentation, the training loop and stratified evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy.ndimage import map_coordinates
from torch import Tensor

from .errors import ConfigError, NumericalError
from .grid import SpatialField, nearest_resample_planes
from .model import BoltzFormer
from .nn_core import DTYPE, ParamStore
from .rng import substream
from .synthdata import ArrayDataset

log = logging.getLogger(__name__)

DICE_EPS = 1.0
BCE_CLAMP = 1e-7
SMALL_AREA = 0.01
_AUG_TAG = 0xA06
_SHUFFLE_TAG = 0x5F1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    aug_prob: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 50

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "patience", "adam_eps", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.aug_prob <= 1:
            raise ConfigError("weight_decay must be >= 0 and aug_prob in [0, 1]")


# --- losses --------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, SpatialField):
        x = x.plane(0)
    return torch.as_tensor(x, dtype=DTYPE)


def dice_loss(pred, target, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``.

    Inputs of shape ``(B, H, W)`` give the batch mean of per-example losses.
    """
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ConfigError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ")
    dims = (-2, -1)
    inter = (p * t).sum(dims)
    loss = 1 - (2 * inter + eps) / (p.sum(dims) + t.sum(dims) + eps)
    return loss.mean()


def bce_loss(pred, target) -> Tensor:
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ConfigError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ")
    p = p.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def total_loss(pred, target) -> Tensor:
    return dice_loss(pred, target) + bce_loss(pred, target)


def dice_score(pred_mask: np.ndarray, target: np.ndarray) -> float:
    """Hard Dice of two boolean masks; two empty masks score 1."""
    p, t = np.asarray(pred_mask, bool), np.asarray(target, bool)
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else 2.0 * (p & t).sum() / denom


# --- augmentation ----------------------------------------------------------------


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, prob: float = 0.5,
            rotate: bool = True, shift: float = 0.1, scale: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Random quarter-turn rotation plus a shifted/scaled crop resized back.

    ``image`` is ``(H, W, C)`` and ``mask`` ``(H, W)``; both get the same
    transform and the mask is re-binarized at 0.5. If the crop would erase a
    tiny target entirely, only the rotation is kept.
    """
    if image.shape[0] != image.shape[1]:
        raise ConfigError("augment expects square inputs")
    if rng.random() >= prob:
        return image, mask
    k = int(rng.integers(4)) if rotate else 0
    dy, dx = rng.uniform(-shift, shift, size=2) if shift > 0 else (0.0, 0.0)
    s = rng.uniform(1 - scale, 1 + scale) if scale > 0 else 1.0
    img = np.rot90(image, k, axes=(0, 1))
    msk = np.rot90(mask, k, axes=(0, 1))
    if shift == 0 and scale == 0:
        return np.ascontiguousarray(img), np.ascontiguousarray(msk)
    size = image.shape[0]
    c = (size - 1) / 2
    grid = np.arange(size, dtype=np.float64)
    src_y = c + dy * size + (grid - c) * s
    src_x = c + dx * size + (grid - c) * s
    coords = np.stack(np.meshgrid(src_y, src_x, indexing="ij"))
    new_mask = map_coordinates(msk.astype(np.float64), coords, order=1, mode="constant", cval=0.0) >= 0.5
    if msk.any() and not new_mask.any():
        return np.ascontiguousarray(img), np.ascontiguousarray(msk)
    new_img = np.stack(
        [map_coordinates(img[..., ch], coords, order=1, mode="constant", cval=0.0) for ch in range(img.shape[-1])],
        axis=-1,
    )
    return new_img, new_mask.astype(mask.dtype)


# --- evaluation ------------------------------------------------------------------


def target_at_output(masks: np.ndarray, size: int) -> np.ndarray:
    """Ground truth ``(B, H, W)`` resampled nearest-neighbour to the PiGMA grid."""
    return nearest_resample_planes(masks, size, size)


@dataclass
class StratumStats:
    mean: float
    std: float
    stderr: float
    count: int


@dataclass
class EvalResult:
    dice: np.ndarray  # per example
    areas: np.ndarray
    loss_dice: float
    loss_bce: float
    pairs_mean: float
    strata: dict[str, StratumStats]
    predictions: np.ndarray | None = None  # (n, S, S) probabilities

    def row(self, epoch: int, split: str) -> dict:
        return {
            "epoch": epoch,
            "split": split,
            "loss_dice": self.loss_dice,
            "loss_bce": self.loss_bce,
            "dice_small": self.strata["small"].mean,
            "dice_large": self.strata["large"].mean,
            "dice_all": self.strata["all"].mean,
            "attended_pairs_mean": self.pairs_mean,
        }


def stratify(dice: np.ndarray, areas: np.ndarray) -> dict[str, StratumStats]:
    out = {}
    for name, sel in (("small", areas < SMALL_AREA), ("large", areas >= SMALL_AREA), ("all", np.ones_like(areas, bool))):
        vals = dice[sel]
        if vals.size == 0:
            out[name] = StratumStats(math.nan, math.nan, math.nan, 0)
            continue
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[name] = StratumStats(float(vals.mean()), std, std / math.sqrt(vals.size), int(vals.size))
    return out


@torch.no_grad()
def evaluate_stratified(model: BoltzFormer, data: ArrayDataset, batch_size: int = 50,
                        keep_predictions: bool = False, sampler=None) -> EvalResult:
    """Per-example hard Dice at threshold 0.5, aggregated into small/large/all strata.

    Sampling streams are keyed by example index, so results do not depend on
    batch composition.
    """
    model.eval()
    size = model.config.output_size
    dice, preds = [], []
    ld = lb = 0.0
    pairs = 0.0
    for lo in range(0, len(data), batch_size):
        part = data.subset(np.arange(lo, min(lo + batch_size, len(data))))
        out = model(torch.from_numpy(part.images), torch.from_numpy(part.prompts),
                    example_keys=part.indices.tolist(), sampler=sampler)
        probs = out.probabilities
        target = torch.from_numpy(target_at_output(part.masks, size).astype(np.float64))
        n = len(part)
        ld += float(dice_loss(probs, target)) * n
        lb += float(bce_loss(probs, target)) * n
        pairs += float(out.decoder.trace.pairs_per_layer().sum(0).sum())
        hard = probs.numpy() >= 0.5
        tgt = target.numpy() > 0.5
        dice.extend(dice_score(h, t) for h, t in zip(hard, tgt))
        if keep_predictions:
            preds.append(probs.numpy())
    dice_arr = np.array(dice)
    n_total = len(data)
    return EvalResult(
        dice=dice_arr,
        areas=data.areas.copy(),
        loss_dice=ld / n_total,
        loss_bce=lb / n_total,
        pairs_mean=pairs / n_total,
        strata=stratify(dice_arr, data.areas),
        predictions=np.concatenate(preds) if keep_predictions else None,
    )


# --- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_state: bytes = b""
    stopped_early: bool = False


def _dump_diagnostics(path: Path | None, info: dict) -> None:
    if path is None:
        return
    path.mkdir(parents=True, exist_ok=True)
    (path / "numerical_failure.txt").write_text("".join(f"{k} = {v}\n" for k, v in info.items()))


def train(model: BoltzFormer, train_data: ArrayDataset, val_data: ArrayDataset, cfg: TrainConfig,
          on_epoch: Callable[[list[dict]], None] | None = None, diag_dir: Path | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Minimize Dice + BCE of the PiGMA output; early-stop on validation loss.

    The model is left holding the best-validation parameters.
    """
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    store = ParamStore(model)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                            betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    size = model.config.output_size
    result = TrainResult()
    bad_epochs = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        order = substream(cfg.seed, _SHUFFLE_TAG, epoch).permutation(len(train_data))
        ld_sum = lb_sum = pair_sum = 0.0
        dice_vals: list[float] = []
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            part = train_data.subset(rows)
            images, masks = [], []
            for idx, img, msk in zip(part.indices, part.images, part.masks):
                a_img, a_msk = augment(img, msk, substream(cfg.seed, _AUG_TAG, epoch, int(idx)), cfg.aug_prob)
                images.append(a_img)
                masks.append(a_msk)
            images_t = torch.from_numpy(np.stack(images).astype(np.float64))
            target_np = target_at_output(np.stack(masks), size)
            target = torch.from_numpy(target_np.astype(np.float64))
            keys = [(epoch + 1) * 1_000_000 + int(i) for i in part.indices]
            try:
                out = model(images_t, torch.from_numpy(part.prompts), example_keys=keys)
            except NumericalError as exc:
                _dump_diagnostics(diag_dir, {"epoch": epoch, "step": step, "error": exc,
                                             "examples": part.indices.tolist()})
                raise
            ld = dice_loss(out.probabilities, target)
            lb = bce_loss(out.probabilities, target)
            loss = ld + lb
            if not torch.isfinite(loss):
                _dump_diagnostics(diag_dir, {"epoch": epoch, "step": step, "loss_dice": float(ld.detach()),
                                             "loss_bce": float(lb.detach()), "examples": part.indices.tolist()})
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n = len(rows)
            ld_sum += float(ld.detach()) * n
            lb_sum += float(lb.detach()) * n
            pair_sum += float(out.decoder.trace.pairs_per_layer().sum())
            hard = out.probabilities.detach().numpy() >= 0.5
            dice_vals.extend(dice_score(h, t) for h, t in zip(hard, target_np > 0.5))
            if max_steps is not None and step >= max_steps:
                break
        seen = len(dice_vals)
        tr_strata = stratify(np.array(dice_vals), train_data.subset(order[:seen]).areas)
        train_row = {
            "epoch": epoch, "split": "train", "loss_dice": ld_sum / seen, "loss_bce": lb_sum / seen,
            "dice_small": tr_strata["small"].mean, "dice_large": tr_strata["large"].mean,
            "dice_all": tr_strata["all"].mean, "attended_pairs_mean": pair_sum / seen,
        }
        val = evaluate_stratified(model, val_data, cfg.eval_batch_size)
        val_row = val.row(epoch, "val")
        rows_out = [train_row, val_row]
        result.history.extend(rows_out)
        log.info("epoch %d train loss %.4f val loss %.4f val dice small %.3f all %.3f", epoch,
                 train_row["loss_dice"] + train_row["loss_bce"], val.loss_dice + val.loss_bce,
                 val.strata["small"].mean, val.strata["all"].mean)
        if on_epoch is not None:
            on_epoch(rows_out)
        val_loss = val.loss_dice + val.loss_bce
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = store.to_bytes()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                result.stopped_early = True
                break
        if max_steps is not None and step >= max_steps:
            break
    store.load_bytes(result.best_state)
    return result
