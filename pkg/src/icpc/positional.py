"""Grid-consistent selection of learned position-embedding indices.

A model trained on a full-size token grid owns one position embedding per
grid cell, numbered in raster order (frame-major, then rows, then columns).
When an input is compressed to a smaller grid, the embeddings for the
surviving cells are picked so that neighbouring cells keep the same index
offsets they had in the full grid: +1 along a row, +W across rows and
+H*W across frames, where W and H are the full grid's width and height.
Taking the first n table entries instead (the 1-D convention used for
text) breaks those offsets for 2-D and 3-D inputs; it is kept here only
as a comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCompressionError


@dataclass(frozen=True)
class GridDims:
    """Token-grid shape: frames x patch rows x patch columns.

    Text sequences use (1, 1, n); images and spectrograms use
    (1, rows, cols); videos use (frames, rows, cols).
    """

    time: int = 1
    height: int = 1
    width: int = 1

    def __post_init__(self):
        for name in ("time", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"GridDims.{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.time * self.height * self.width

    def fits_within(self, other: "GridDims") -> bool:
        return (
            self.time <= other.time
            and self.height <= other.height
            and self.width <= other.width
        )


@dataclass(frozen=True)
class PositionSelection:
    """Indices into the full position table for one compressed grid.

    Indices are listed in raster order of the compressed grid and are
    strictly increasing, pairwise distinct and bounded by full.total.
    """

    indices: np.ndarray
    full: GridDims
    compressed: GridDims

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1 or idx.size != self.compressed.total:
            raise ValueError(
                f"expected {self.compressed.total} indices for grid {self.compressed}, got {idx.shape}"
            )
        if idx[0] < 0 or idx[-1] >= self.full.total:
            raise ValueError("indices fall outside the full position table")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing in raster order")

    def __len__(self) -> int:
        return int(self.indices.size)


def select_1d(full_len: int, comp_len: int) -> PositionSelection:
    """Pick positions for a shortened 1-D sequence: the first comp_len entries."""
    if comp_len < 1 or comp_len > full_len:
        raise InvalidCompressionError(
            f"cannot select {comp_len} positions from a table of {full_len}"
        )
    return PositionSelection(
        np.arange(comp_len, dtype=np.int64),
        GridDims(1, 1, full_len),
        GridDims(1, 1, comp_len),
    )


def select_2d(full: GridDims, comp: GridDims) -> PositionSelection:
    """Pick positions for a compressed 2-D grid.

    Cell (r, c) keeps the index it had in the full grid, r*W + c, so
    horizontal neighbours differ by 1 and vertical neighbours by the full
    grid width W. The selection is the top-left sub-grid of the table.
    """
    if full.time != 1 or comp.time != 1:
        raise ValueError("select_2d expects grids with time=1")
    if not comp.fits_within(full):
        raise InvalidCompressionError(f"compressed grid {comp} exceeds full grid {full}")
    rows = np.arange(comp.height, dtype=np.int64) * full.width
    idx = (rows[:, None] + np.arange(comp.width, dtype=np.int64)[None, :]).reshape(-1)
    return PositionSelection(idx, full, comp)


def select_3d(full: GridDims, comp: GridDims) -> PositionSelection:
    """Pick positions for a compressed 3-D grid.

    Cell (f, r, c) keeps index f*H*W + r*W + c from the full grid, so
    temporal neighbours differ by H*W, vertical by W, horizontal by 1.
    """
    if not comp.fits_within(full):
        raise InvalidCompressionError(f"compressed grid {comp} exceeds full grid {full}")
    frames = np.arange(comp.time, dtype=np.int64) * (full.height * full.width)
    rows = np.arange(comp.height, dtype=np.int64) * full.width
    cols = np.arange(comp.width, dtype=np.int64)
    idx = (frames[:, None, None] + rows[None, :, None] + cols[None, None, :]).reshape(-1)
    return PositionSelection(idx, full, comp)


def first_n_baseline(full: GridDims, comp: GridDims) -> PositionSelection:
    """Baseline that takes the first comp.total table entries.

    Ignores grid structure entirely; correct for 1-D sequences, index
    deltas are wrong for 2-D/3-D grids whenever rows are not full width.
    Used only as a comparison arm.
    """
    if comp.total > full.total:
        raise InvalidCompressionError(
            f"compressed grid {comp} has more cells than full grid {full}"
        )
    return PositionSelection(np.arange(comp.total, dtype=np.int64), full, comp)


def verify_consistency(sel: PositionSelection) -> bool:
    """Check the axis-correct index deltas for every grid-adjacent pair.

    True iff horizontal neighbours differ by 1, vertical neighbours by the
    full width and temporal neighbours by full height * full width.
    """
    comp = sel.compressed
    grid = np.asarray(sel.indices).reshape(comp.time, comp.height, comp.width)
    if comp.width > 1 and not np.all(np.diff(grid, axis=2) == 1):
        return False
    if comp.height > 1 and not np.all(np.diff(grid, axis=1) == sel.full.width):
        return False
    if comp.time > 1 and not np.all(
        np.diff(grid, axis=0) == sel.full.height * sel.full.width
    ):
        return False
    return True
