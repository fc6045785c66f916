"""Spatial fields on an image grid and the resampling primitives built on them.

Layout is row-major ``(y, x, c)`` everywhere. Bilinear resampling is
corner-aligned: the first and last sample of the output sit exactly on the
first and last cell of the input, so probability mass lines up across scales.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DegenerateDistributionError


@dataclass(frozen=True)
class SpatialField:
    """Dense ``height x width x channels`` float64 array.

    ``data`` is stored read-only; operations return new fields.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ConfigError(f"SpatialField needs (H, W, C) data, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ConfigError(f"SpatialField dims must be >= 1, got {arr.shape}")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[:, :, c]

    def flat(self) -> np.ndarray:
        """Row-major flattening, length ``height * width * channels``."""
        return self.data.reshape(-1)

    @classmethod
    def full(cls, height: int, width: int, value: float, channels: int = 1) -> "SpatialField":
        return cls(np.full((height, width, channels), float(value)))


@dataclass
class FeaturePyramid:
    """Multiscale visual features plus the semantic map.

    ``levels`` holds ``(stride, features)`` pairs ordered coarse to fine; the
    feature arrays are batched channel-last ``(B, h, w, d)`` tensors or arrays.
    """

    levels: list[tuple[int, Any]]
    semantic: Any

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("FeaturePyramid needs at least one level")
        strides = [s for s, _ in self.levels]
        if any(a <= b for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"pyramid strides must strictly decrease, got {strides}")
        d = self.semantic.shape[-1]
        for s, feat in self.levels:
            if feat.shape[-1] != d:
                raise ConfigError(f"level stride {s} has {feat.shape[-1]} channels, semantic has {d}")

    @property
    def dim(self) -> int:
        return self.semantic.shape[-1]

    def level_shape(self, index: int) -> tuple[int, int]:
        feat = self.levels[index][1]
        return feat.shape[-3], feat.shape[-2]


@lru_cache(maxsize=128)
def _interp_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    mat.setflags(write=False)
    return mat


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D corner-aligned linear interpolation as an ``(n_out, n_in)`` matrix.

    Rows sum to one. Resampling a 2-D grid is ``Ry @ X @ Rx.T``.
    """
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"interpolation sizes must be >= 1, got {n_in} -> {n_out}")
    return _interp_matrix_cached(int(n_in), int(n_out))


@lru_cache(maxsize=128)
def _lerp_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_in == 1 or n_out == 1:
        zero = np.zeros(n_out, dtype=int)
        return zero, zero, np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    return lo, lo + 1, pos - lo


def _lerp_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    # a + t (b - a) keeps constant runs bit-exact, unlike (1 - t) a + t b
    lo, hi, frac = _lerp_taps(arr.shape[axis], n_out)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    return a + frac.reshape(shape) * (b - a)


def resample_planes(arr: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear resampling over the last two axes of ``arr`` (``..., H, W``)."""
    if out_height < 1 or out_width < 1:
        raise ConfigError(f"resample target must be >= 1x1, got {out_height}x{out_width}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-2:] == (out_height, out_width):
        return arr
    return _lerp_axis(_lerp_axis(arr, out_height, arr.ndim - 2), out_width, arr.ndim - 1)


def bilinear_resample(field: SpatialField, out_height: int, out_width: int) -> SpatialField:
    if out_height < 1 or out_width < 1:
        raise ConfigError(f"resample target must be >= 1x1, got {out_height}x{out_width}")
    if (out_height, out_width) == (field.height, field.width):
        return field
    out = _lerp_axis(_lerp_axis(field.data, out_height, 0), out_width, 1)
    return SpatialField(out)


def nearest_resample_planes(arr: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Nearest-neighbour resampling over the last two axes (cell-centre aligned).

    Used for binary targets, where bilinear blurring is unwanted.
    """
    h, w = arr.shape[-2], arr.shape[-1]
    iy = np.minimum(((np.arange(out_height) + 0.5) * h / out_height).astype(int), h - 1)
    ix = np.minimum(((np.arange(out_width) + 0.5) * w / out_width).astype(int), w - 1)
    return arr[..., iy[:, None], ix[None, :]]


def renormalize_probability(field: SpatialField) -> SpatialField:
    if field.channels != 1:
        raise ConfigError("renormalize_probability expects a 1-channel field")
    data = field.data
    if np.any(data < 0) or not np.all(np.isfinite(data)):
        raise DegenerateDistributionError("probability field has negative or non-finite entries")
    total = data.sum()
    if total <= 0:
        raise DegenerateDistributionError("probability field has zero total mass")
    return SpatialField(data / total)


# --- PGM / PBM ------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".txt")


def write_pgm(path: str | Path, field: SpatialField, extra: dict[str, Any] | None = None) -> Path:
    """Write a 1-channel field as binary PGM (P5, maxval 255).

    Values are min-max scaled; the scaling lives in ``<path>.txt`` so the
    field can be recovered to within one grey level.
    """
    if field.channels != 1:
        raise ConfigError("only 1-channel fields serialize to PGM")
    path = Path(path)
    data = field.plane(0)
    lo, hi = float(data.min()), float(data.max())
    span = hi - lo
    scaled = np.zeros_like(data) if span == 0 else (data - lo) / span
    pixels = np.rint(scaled * 255).astype(np.uint8)
    header = f"P5\n{field.width} {field.height}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    lines = [f"min = {lo!r}", f"max = {hi!r}", f"height = {field.height}", f"width = {field.width}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    _sidecar(path).write_text("\n".join(lines) + "\n")
    return path


def _read_netpbm_header(raw: bytes, magic: bytes) -> tuple[list[int], int]:
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    tokens: list[int] = []
    pos = 2
    wanted = 3 if magic == b"P5" else 2
    while len(tokens) < wanted:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_pgm(path: str | Path) -> SpatialField:
    """Inverse of :func:`write_pgm`; applies the sidecar scaling when present."""
    path = Path(path)
    raw = path.read_bytes()
    (width, height, maxval), offset = _read_netpbm_header(raw, b"P5")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=offset)
    data = pixels.reshape(height, width).astype(np.float64) / maxval
    side = _sidecar(path)
    if side.exists():
        meta = dict(line.split(" = ", 1) for line in side.read_text().splitlines() if " = " in line)
        lo, hi = float(meta["min"]), float(meta["max"])
        data = lo + data * (hi - lo)
    return SpatialField(data)


def write_pbm(path: str | Path, mask: np.ndarray | SpatialField) -> Path:
    """Binary PBM (P4). Nonzero entries are written as 1 (black)."""
    path = Path(path)
    arr = mask.plane(0) if isinstance(mask, SpatialField) else np.asarray(mask)
    bits = np.packbits(arr != 0, axis=1)
    header = f"P4\n{arr.shape[1]} {arr.shape[0]}\n".encode("ascii")
    path.write_bytes(header + bits.tobytes())
    return path


def read_pbm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (width, height), offset = _read_netpbm_header(raw, b"P4")
    row_bytes = (width + 7) // 8
    packed = np.frombuffer(raw, dtype=np.uint8, count=row_bytes * height, offset=offset)
    return np.unpackbits(packed.reshape(height, row_bytes), axis=1)[:, :width].astype(bool)


def stack_planes(fields: Sequence[SpatialField]) -> np.ndarray:
    """Stack 1-channel fields into an ``(n, H, W)`` array."""
    return np.stack([f.plane(0) for f in fields])
