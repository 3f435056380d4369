"""Mask-based coded image formation.

A printed mask at a distance from the sensor weights each angular view
differently. Discretized, the mask is a k x k tile, cyclically tiled over
the sensor and shifted by `shift_per_view` pixels per unit angular step;
the coded image is the per-pixel mask-weighted sum of all views. Integer
shifts keep the forward model an exactly testable linear operator.

Tile values are clipped Gaussians: 0.5 + 0.25 * N(0,1) clamped to [0, 1],
drawn from the portable SplitMix64 stream so the same seed yields the
same bytes everywhere. Masks persist to a small binary container that
stores the realized values, so captures stay reproducible even if the
generator changes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .lightfield import LightField
from .rng import SplitMix64

MASK_MAGIC = b"CMSK"
DEFAULT_TILE = 15


@dataclass(frozen=True)
class CodeMask:
    """k x k tile in [0, 1] plus the per-view shift and the seed that
    produced it."""

    tile: np.ndarray
    shift_per_view: int = 1
    seed: int = 0

    def __post_init__(self):
        tile = np.asarray(self.tile, dtype=np.float64)
        if tile.ndim != 2 or tile.shape[0] != tile.shape[1] or tile.shape[0] < 1:
            raise ShapeError(f"mask tile must be square and non-empty, got {tile.shape}")
        if tile.min() < 0.0 or tile.max() > 1.0:
            raise ValueError("mask tile values must lie in [0, 1]")
        tile.setflags(write=False)
        object.__setattr__(self, "tile", tile)

    @property
    def k(self) -> int:
        return self.tile.shape[0]


@dataclass(frozen=True)
class CodedImage:
    """Sensor measurement (C, H, W), non-negative, bounded by the view
    count; provenance pins the mask and source dimensions."""

    data: np.ndarray
    mask_seed: int
    shift_per_view: int
    grid_size: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"coded image must be (C, H, W), got {data.shape}")
        if data.min() < 0.0 or data.max() > self.grid_size ** 2 + 1e-6:
            raise ValueError("coded image values must lie in [0, grid_size^2]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


def gen_mask(seed: int, k: int = DEFAULT_TILE, shift_per_view: int = 1) -> CodeMask:
    """Draw the k*k clipped-Gaussian tile for `seed`."""
    if k < 1:
        raise ValueError("mask tile extent must be >= 1")
    rng = SplitMix64(seed)
    z = rng.normals(k * k).reshape(k, k)
    tile = np.clip(0.5 + 0.25 * z, 0.0, 1.0)
    return CodeMask(tile=tile, shift_per_view=shift_per_view, seed=seed)


def modulation(mask: CodeMask, q: tuple[int, int], height: int, width: int) -> np.ndarray:
    """Per-view weight map: the tile tiled over the sensor and cyclically
    shifted by shift_per_view * q pixels,
    f_q(y, x) = tile((y + s*q_u) mod k, (x + s*q_v) mod k)."""
    k = mask.k
    s = mask.shift_per_view
    qu, qv = q
    rows = (np.arange(height) + s * qu) % k
    cols = (np.arange(width) + s * qv) % k
    return mask.tile[np.ix_(rows, cols)]


def capture(lf: LightField, mask: CodeMask, dtype=np.float64) -> CodedImage:
    """Coded image I_c(c, y, x) = sum_q f_q(y, x) * L_q(c, y, x); the same
    spatial weights apply to every color channel."""
    h, w = lf.height, lf.width
    acc = np.zeros((lf.channels, h, w), dtype=np.float64)
    for qu, qv in lf.angular_offsets():
        f_q = modulation(mask, (qu, qv), h, w)
        acc += f_q[None, :, :] * lf.view(qu, qv).astype(np.float64)
    return CodedImage(
        data=acc.astype(dtype),
        mask_seed=mask.seed,
        shift_per_view=mask.shift_per_view,
        grid_size=lf.grid_size,
    )


def view_weight_sum(mask: CodeMask, grid_size: int, height: int, width: int) -> np.ndarray:
    """Per-pixel sum of mask weights over the whole view grid. Dividing a
    coded image by this map yields a weighted view average in [0, 1],
    the normalization the networks consume."""
    r = (grid_size - 1) // 2
    total = np.zeros((height, width), dtype=np.float64)
    for qu in range(-r, r + 1):
        for qv in range(-r, r + 1):
            total += modulation(mask, (qu, qv), height, width)
    return total


def save_mask(mask: CodeMask, path) -> None:
    """Persist as CMSK: magic, u32 [k, s], u64 seed, k*k float32 values."""
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<2I", mask.k, mask.shift_per_view))
        fh.write(struct.pack("<Q", mask.seed))
        fh.write(mask.tile.astype("<f4").tobytes(order="C"))


def load_mask(path) -> CodeMask:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MASK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MASK_MAGIC!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise FormatError(f"{path}: truncated header")
        k, s = struct.unpack("<2I", head)
        seed_raw = fh.read(8)
        if len(seed_raw) != 8:
            raise FormatError(f"{path}: truncated seed")
        (seed,) = struct.unpack("<Q", seed_raw)
        payload = fh.read(4 * k * k)
        if len(payload) != 4 * k * k:
            raise FormatError(f"{path}: truncated tile payload")
        tile = np.frombuffer(payload, dtype="<f4").reshape(k, k).astype(np.float64)
    return CodeMask(tile=tile, shift_per_view=s, seed=seed)
