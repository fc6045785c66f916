"""Differentiable building blocks in float64, plus the gradient checker.

Reverse-mode gradients come from torch autograd. Everything here is built so
that :func:`grad_check` (central finite differences) can audit it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, EmptyAttentionSetError, NumericalError

DTYPE = torch.float64
LN_EPS = 1e-5


# --- parameter creation & deterministic init --------------------------------


def weight_param(*shape: int, fan_in: int) -> nn.Parameter:
    p = nn.Parameter(torch.zeros(*shape, dtype=DTYPE))
    p.init_kind = "uniform"
    p.fan_in = fan_in
    return p


def bias_param(*shape: int) -> nn.Parameter:
    p = nn.Parameter(torch.zeros(*shape, dtype=DTYPE))
    p.init_kind = "zeros"
    return p


def gain_param(*shape: int) -> nn.Parameter:
    p = nn.Parameter(torch.ones(*shape, dtype=DTYPE))
    p.init_kind = "ones"
    return p


def reset_parameters(module: nn.Module, seed: int) -> None:
    """Seeded init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit gains.

    Parameters are visited in registration order and drawn from one Philox
    stream, so the result depends only on ``seed`` and the architecture.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            kind = getattr(p, "init_kind", None)
            if kind == "uniform":
                bound = 1.0 / math.sqrt(p.fan_in)
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))
            elif kind == "zeros":
                p.zero_()
            elif kind == "ones":
                p.fill_(1.0)
            else:
                raise ConfigError(f"parameter {name!r} has no init rule")


# --- layers ------------------------------------------------------------------


class Linear(nn.Module):
    """``y = x W + b`` with ``W`` stored as ``(in, out)``."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = weight_param(n_in, n_out, fan_in=n_in)
        self.bias = bias_param(n_out) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class MLP(nn.Module):
    """GELU multilayer perceptron; ``depth`` counts linear layers.

    Used both as the query-to-mu map and as the transformer FFN.
    """

    def __init__(self, dim: int, hidden: int | None = None, out: int | None = None, depth: int = 2):
        super().__init__()
        if depth < 1:
            raise ConfigError("MLP depth must be >= 1")
        hidden = 2 * dim if hidden is None else hidden
        out = dim if out is None else out
        widths = [dim] + [hidden] * (depth - 1) + [out]
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(widths, widths[1:]))
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ConfigError(f"MLP expects last dim {self.dim}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


def mlp_apply(mlp: MLP, q: Tensor) -> Tensor:
    return mlp(q)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (biased variance, eps inside the sqrt)."""
    if x.shape[-1] < 2:
        raise ConfigError("layer_norm needs at least 2 features")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = gain_param(dim)
        self.bias = bias_param(dim)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def masked_softmax(scores: Tensor, mask: Tensor | None, dim: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries come out exactly zero."""
    if mask is None:
        return torch.softmax(scores, dim=dim)
    if not bool(mask.any(dim=dim).all()):
        raise EmptyAttentionSetError("softmax over an empty attention set")
    masked = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(masked, dim=dim)


# --- parameter store & checkpoints ------------------------------------------

_MAGIC = b"BZFCKPT\x00"
_VERSION = 1


class ParamStore:
    """Name-addressed view over a module's parameters and their gradients."""

    def __init__(self, module: nn.Module):
        self.module = module
        self._params = dict(module.named_parameters())

    def names(self) -> list[str]:
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"undeclared parameter {name!r}") from None

    def __len__(self) -> int:
        return len(self._params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._params.items()}

    def grad(self, name: str) -> Tensor:
        p = self[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def to_bytes(self) -> bytes:
        chunks = [_MAGIC, struct.pack("<II", _VERSION, len(self._params))]
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            arr = p.detach().cpu().numpy().astype("<f8", copy=False)
            chunks.append(struct.pack("<I", len(raw)) + raw)
            chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            chunks.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(chunks)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    def load_bytes(self, raw: bytes) -> None:
        records = read_checkpoint_bytes(raw)
        missing = set(self._params) - set(records)
        extra = set(records) - set(self._params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        with torch.no_grad():
            for name, arr in records.items():
                p = self._params[name]
                if tuple(p.shape) != arr.shape:
                    raise ConfigError(f"checkpoint shape {arr.shape} for {name!r}, model has {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))

    def load(self, path: str | Path) -> None:
        self.load_bytes(Path(path).read_bytes())


def read_checkpoint_bytes(raw: bytes) -> dict[str, np.ndarray]:
    if not raw.startswith(_MAGIC):
        raise ConfigError("not a checkpoint file (bad magic)")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", raw, pos)
    pos += 8
    if version != _VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        out[name] = arr
    if pos != len(raw):
        raise ConfigError("trailing bytes in checkpoint")
    return out


# --- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str
    finite: bool = True
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]] | Iterable[tuple[str, Tensor]],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    max_per_tensor: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``tensors`` are leaf tensors ``fn`` closes over; they are perturbed in
    place and restored. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_per_tensor`` subsamples entries
    of large tensors with a seeded choice.
    """
    tensors = list(tensors)
    leaves = [t for _, t in tensors]
    for t in leaves:
        if t.dtype != DTYPE:
            raise ConfigError("grad_check requires float64 tensors")
        t.grad = None
    saved = [t.requires_grad for t in leaves]
    for t in leaves:
        t.requires_grad_(True)
    try:
        out = fn()
        if out.numel() != 1:
            raise ConfigError("grad_check needs a scalar-valued function")
        if not torch.isfinite(out):
            return GradCheckReport(math.inf, 0, "forward", finite=False, tolerance=tolerance)
        analytic = torch.autograd.grad(out, leaves, allow_unused=True)
        rng = np.random.default_rng(seed)
        worst_err, worst_name, n = 0.0, "", 0
        with torch.no_grad():
            for (name, t), g in zip(tensors, analytic):
                g = torch.zeros_like(t) if g is None else g
                flat_t = t.view(-1)
                flat_g = g.reshape(-1)
                idx = np.arange(flat_t.numel())
                if max_per_tensor is not None and idx.size > max_per_tensor:
                    idx = np.sort(rng.choice(idx, size=max_per_tensor, replace=False))
                for k in idx:
                    orig = flat_t[k].item()
                    flat_t[k] = orig + step
                    up = fn().item()
                    flat_t[k] = orig - step
                    down = fn().item()
                    flat_t[k] = orig
                    num = (up - down) / (2 * step)
                    a = flat_g[k].item()
                    if not (math.isfinite(num) and math.isfinite(a)):
                        return GradCheckReport(math.inf, n, f"{name}[{k}]", finite=False, tolerance=tolerance)
                    err = abs(a - num) / max(abs(a), abs(num), floor)
                    n += 1
                    if err > worst_err:
                        worst_err, worst_name = err, f"{name}[{k}]"
        return GradCheckReport(worst_err, n, worst_name, tolerance=tolerance)
    finally:
        for t, flag in zip(leaves, saved):
            t.requires_grad_(flag)


def check_finite(x: Tensor, what: str) -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericalError(f"non-finite values in {what}")
    return x
