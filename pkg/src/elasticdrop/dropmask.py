"""Deterministic row-band drop schedules plus randomized dropout baselines.

The consecutive schedule partitions the feature-map height into horizontal
patches and assigns branch i the mask that zeroes exactly patch i, the same
rows for every sample in every batch. Masks are float 0/1 grids applied by
multiplication, so the backward pass is the same mask applied to the
upstream gradient.

The five randomized strategies (element dropout, spatial dropout, batch
dropout, dropblock, batch dropblock) exist for side-by-side comparison runs
and draw from an explicit numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ShapeError

Array = np.ndarray


@dataclass(frozen=True)
class RowPartition:
    """Ordered (start, end) row ranges covering [0, height)."""

    height: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.height <= 0:
            raise ConfigError(f"RowPartition: height must be positive, got {self.height}")
        covered = np.zeros(self.height, dtype=bool)
        prev_start = -1
        for start, end in self.ranges:
            if not (0 <= start < end <= self.height):
                raise ConfigError(f"RowPartition: bad range [{start}, {end}) for height {self.height}")
            if start < prev_start:
                raise ConfigError("RowPartition: ranges must be sorted by start row")
            prev_start = start
            covered[start:end] = True
        if not covered.all():
            raise ConfigError("RowPartition: ranges must cover every row")

    @property
    def branch_count(self) -> int:
        return len(self.ranges)


# --- drop strategy kinds -------------------------------------------------
#
# rate parameters live in [0, 1); block extents must fit inside the map.

@dataclass(frozen=True)
class ElementDropout:
    """Independent Bernoulli drop per cell and channel, rescaled by 1/(1-rate)."""
    rate: float


@dataclass(frozen=True)
class SpatialDropout:
    """Whole channels dropped independently per sample."""
    rate: float


@dataclass(frozen=True)
class BatchDropout:
    """One channel drop pattern shared across the whole batch."""
    rate: float


@dataclass(frozen=True)
class DropBlock:
    """One random contiguous block zeroed per sample (with probability rate)."""
    block_h: int
    block_w: int
    rate: float = 1.0


@dataclass(frozen=True)
class BatchDropBlock:
    """One random row band (fraction of the height) zeroed, shared across the batch."""
    rows_fraction: float


@dataclass(frozen=True)
class UniformRowDrop:
    """Consecutive schedule over m equal patches; branch i drops patch i."""
    m: int


@dataclass(frozen=True)
class OverlapRowDrop:
    """Consecutive schedule with patches of patch_h rows overlapping by `overlap`."""
    patch_h: int
    overlap: int


@dataclass(frozen=True)
class NoDrop:
    """Single branch, nothing dropped."""


DropStrategyKind = Union[ElementDropout, SpatialDropout, BatchDropout,
                         DropBlock, BatchDropBlock, UniformRowDrop,
                         OverlapRowDrop, NoDrop]

RANDOM_KINDS = (ElementDropout, SpatialDropout, BatchDropout, DropBlock, BatchDropBlock)


def uniform_row_partition(height: int, m: int) -> RowPartition:
    """Split [0, height) into m equal contiguous row ranges, top to bottom."""
    if m <= 0:
        raise ConfigError(f"uniform_row_partition: m must be positive, got {m}")
    if height <= 0 or height % m != 0:
        raise ConfigError(
            f"uniform_row_partition: m={m} must divide height={height}")
    step = height // m
    ranges = tuple((i * step, (i + 1) * step) for i in range(m))
    return RowPartition(height=height, ranges=ranges)


def overlap_row_partition(height: int, patch_h: int, overlap: int) -> RowPartition:
    """Patches of patch_h rows placed at stride patch_h - overlap.

    Ranges are emitted while start + patch_h <= height; if the last emitted
    range ends short of the bottom, one extra range [height - patch_h,
    height) is appended so the partition still covers the whole map.
    """
    if not (0 < overlap < patch_h <= height):
        raise ConfigError(
            f"overlap_row_partition: need 0 < overlap < patch_h <= height, "
            f"got overlap={overlap}, patch_h={patch_h}, height={height}")
    stride = patch_h - overlap
    ranges = []
    start = 0
    while start + patch_h <= height:
        ranges.append((start, start + patch_h))
        start += stride
    if ranges[-1][1] < height:
        ranges.append((height - patch_h, height))
    return RowPartition(height=height, ranges=tuple(ranges))


def drop_patch_mask(partition: RowPartition, branch: int, width: int) -> Array:
    """Keep/drop grid for branch i (1-based): zeros exactly range i's rows.

    Returns a float64 array of shape (height, width) with entries 0 or 1.
    """
    if width <= 0:
        raise ConfigError(f"drop_patch_mask: width must be positive, got {width}")
    if not 1 <= branch <= partition.branch_count:
        raise ConfigError(
            f"drop_patch_mask: branch {branch} outside 1..{partition.branch_count}")
    mask = np.ones((partition.height, width))
    start, end = partition.ranges[branch - 1]
    mask[start:end, :] = 0.0
    return mask


def apply_mask(feature_map, mask) -> Array:
    """Multiply an (H, W, C) or (N, H, W, C) map by an (H, W) mask.

    The mask broadcasts over channels (and the batch axis when present);
    the input array is left unmodified.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"apply_mask: mask must be 2-d, got {mask.shape}")
    if fm.ndim == 3:
        if fm.shape[:2] != mask.shape:
            raise ShapeError(f"apply_mask: map {fm.shape} vs mask {mask.shape}")
        return fm * mask[:, :, None]
    if fm.ndim == 4:
        if fm.shape[1:3] != mask.shape:
            raise ShapeError(f"apply_mask: map {fm.shape} vs mask {mask.shape}")
        return fm * mask[None, :, :, None]
    raise ShapeError(f"apply_mask: map must be 3-d or 4-d, got {fm.shape}")


def branch_masks(kind: DropStrategyKind, height: int, width: int) -> list[Array]:
    """All branch masks of a deterministic schedule, in branch order.

    NoDrop yields a single all-ones mask; randomized kinds have no fixed
    masks and are rejected here (see ``baseline_mask``).
    """
    if isinstance(kind, NoDrop):
        return [np.ones((height, width))]
    if isinstance(kind, UniformRowDrop):
        part = uniform_row_partition(height, kind.m)
    elif isinstance(kind, OverlapRowDrop):
        part = overlap_row_partition(height, kind.patch_h, kind.overlap)
    else:
        raise ConfigError(f"branch_masks: {type(kind).__name__} is not deterministic")
    return [drop_patch_mask(part, i, width) for i in range(1, part.branch_count + 1)]


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop rate must lie in [0, 1), got {rate}")


def baseline_mask(kind: DropStrategyKind, height: int, width: int, channels: int,
                  rng: np.random.Generator, batch_size: int = 1) -> Array:
    """Draw one batch worth of masks for a randomized dropout strategy.

    Returns a float64 array of shape (batch_size, height, width, channels).
    Per-batch strategies (BatchDropout, BatchDropBlock) repeat one draw over
    the batch axis; per-sample strategies draw independently per sample.
    Only ElementDropout rescales kept entries; the block-style strategies
    stay plain keep/drop.
    """
    if min(height, width, channels, batch_size) <= 0:
        raise ConfigError("baseline_mask: all dimensions must be positive")
    shape = (batch_size, height, width, channels)

    if isinstance(kind, ElementDropout):
        _check_rate(kind.rate)
        if kind.rate == 0.0:
            return np.ones(shape)
        keep = rng.random(shape) >= kind.rate
        return keep.astype(np.float64) / (1.0 - kind.rate)

    if isinstance(kind, SpatialDropout):
        _check_rate(kind.rate)
        keep = np.ones(shape)
        if kind.rate > 0.0:
            chan = rng.random((batch_size, channels)) >= kind.rate
            keep *= chan[:, None, None, :].astype(np.float64)
        return keep

    if isinstance(kind, BatchDropout):
        _check_rate(kind.rate)
        keep = np.ones(shape)
        if kind.rate > 0.0:
            chan = rng.random(channels) >= kind.rate
            keep *= chan[None, None, None, :].astype(np.float64)
        return keep

    if isinstance(kind, DropBlock):
        # rate is the per-sample probability of dropping a block; 1.0 = always.
        if not (0 < kind.block_h <= height and 0 < kind.block_w <= width):
            raise ConfigError(
                f"DropBlock: block {kind.block_h}x{kind.block_w} exceeds map "
                f"{height}x{width}")
        if not 0.0 <= kind.rate <= 1.0:
            raise ConfigError(f"DropBlock: rate must lie in [0, 1], got {kind.rate}")
        masks = np.ones(shape)
        for n in range(batch_size):
            if kind.rate < 1.0 and rng.random() >= kind.rate:
                continue
            top = int(rng.integers(0, height - kind.block_h + 1))
            left = int(rng.integers(0, width - kind.block_w + 1))
            masks[n, top:top + kind.block_h, left:left + kind.block_w, :] = 0.0
        return masks

    if isinstance(kind, BatchDropBlock):
        if not 0.0 <= kind.rows_fraction < 1.0:
            raise ConfigError(
                f"BatchDropBlock: rows_fraction must lie in [0, 1), got "
                f"{kind.rows_fraction}")
        masks = np.ones(shape)
        rows = int(round(kind.rows_fraction * height))
        if rows > 0:
            top = int(rng.integers(0, height - rows + 1))
            masks[:, top:top + rows, :, :] = 0.0
        return masks

    raise ConfigError(f"baseline_mask: {type(kind).__name__} is not a randomized strategy")
