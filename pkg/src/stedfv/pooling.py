"""Space-time grid cells, average pooling over cells, and representation sizes.

Cells of a ``kx x ky x l`` grid are ordered x fastest, then y, then t; the
grids of a pyramid are concatenated in the order they are listed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    kx: int
    ky: int
    l: int

    def __post_init__(self):
        if min(self.kx, self.ky, self.l) < 1:
            raise ValueError(f"grid divisions must be >= 1, got {self}")

    @property
    def cells(self) -> int:
        return self.kx * self.ky * self.l

    def __str__(self) -> str:
        return f"{self.kx}x{self.ky}x{self.l}"


@dataclass(frozen=True)
class PyramidSpec:
    grids: tuple[GridSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(self.grids))
        if not self.grids:
            raise ValueError("a pyramid needs at least one grid")

    @property
    def cells(self) -> int:
        return sum(g.cells for g in self.grids)

    @property
    def is_trivial(self) -> bool:
        return self.grids == (GridSpec(1, 1, 1),)

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for g in self.grids:
            out.append(acc)
            acc += g.cells
        return out

    def __str__(self) -> str:
        return ",".join(str(g) for g in self.grids)

    @classmethod
    def parse(cls, text: str) -> "PyramidSpec":
        """Parse the textual form, e.g. ``"1x1x1,2x2x1,1x1x2,2x2x2"``."""
        grids = []
        for item in text.split(","):
            item = item.strip().lower()
            parts = item.split("x")
            if len(parts) != 3 or not all(p.isdigit() for p in parts):
                raise ValueError(f"bad grid {item!r}; expected KXxKYxL")
            grids.append(GridSpec(*(int(p) for p in parts)))
        return cls(tuple(grids))

    @classmethod
    def trivial(cls) -> "PyramidSpec":
        return cls((GridSpec(1, 1, 1),))


def single_level(l: int) -> PyramidSpec:
    """The 1x1 and 2x2 spatial grids at ``l`` temporal divisions."""
    return PyramidSpec((GridSpec(1, 1, l), GridSpec(2, 2, l)))


def temporal_pyramid(l: int) -> PyramidSpec:
    """Union of :func:`single_level` over l' = 1, 2, 4, ... up to ``l``."""
    grids, level = [], 1
    while level <= l:
        grids.extend(single_level(level).grids)
        level *= 2
    return PyramidSpec(tuple(grids))


def cell_of(location, grid: GridSpec) -> tuple[int, int, int]:
    u, v, w = location
    return (
        min(int(np.floor(u * grid.kx)), grid.kx - 1),
        min(int(np.floor(v * grid.ky)), grid.ky - 1),
        min(int(np.floor(w * grid.l)), grid.l - 1),
    )


def cell_linear_index(triple, grid: GridSpec) -> int:
    ix, iy, it = triple
    if not (0 <= ix < grid.kx and 0 <= iy < grid.ky and 0 <= it < grid.l):
        raise IndexError(f"cell {triple} outside grid {grid}")
    return ix + grid.kx * (iy + grid.ky * it)


def cell_indices(locations: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Vectorized ``cell_linear_index(cell_of(...))`` for rows of (u, v, w)."""
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    div = np.array([grid.kx, grid.ky, grid.l])
    idx = np.minimum(np.floor(loc * div).astype(np.int64), div - 1)
    idx = np.maximum(idx, 0)
    return idx[:, 0] + grid.kx * (idx[:, 1] + grid.ky * idx[:, 2])


def pyramid_cell_indices(locations: np.ndarray, pyramid: PyramidSpec) -> np.ndarray:
    """Global cell index per (descriptor, grid), shape (M, number of grids)."""
    cols = [off + cell_indices(locations, g) for g, off in zip(pyramid.grids, pyramid.offsets())]
    return np.stack(cols, axis=1) if cols else np.empty((0, 0), dtype=np.int64)


@dataclass(frozen=True)
class EncodingLayout:
    pyramid: PyramidSpec
    K: int
    dim: int  # per-descriptor dimension seen by the GMM
    channels: int = 1

    @property
    def block(self) -> int:
        return 2 * self.K * self.dim

    @property
    def length(self) -> int:
        return self.channels * self.pyramid.cells * self.block


@dataclass(frozen=True, eq=False)
class VideoEncoding:
    values: np.ndarray
    layouts: tuple[EncodingLayout, ...]

    def __post_init__(self):
        expected = sum(lay.length for lay in self.layouts)
        if self.values.shape != (expected,):
            raise ValueError(f"encoding length {self.values.shape} != {expected}")

    def __len__(self) -> int:
        return self.values.shape[0]


def pooled_cells(contributions, locations, pyramid: PyramidSpec):
    """Average contributions per cell.

    Returns ``(blocks, counts)``: ``blocks`` has one row per cell in
    canonical order, ``counts`` the member count of each cell.  Empty cells
    give zero rows.
    """
    contrib = np.asarray(contributions, dtype=np.float64)
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    if contrib.ndim != 2 or contrib.shape[0] != locations.shape[0]:
        raise ValueError("contributions and locations must have equal length")
    blocks = np.zeros((pyramid.cells, contrib.shape[1]))
    counts = np.zeros(pyramid.cells, dtype=np.int64)
    if contrib.shape[0] == 0:
        return blocks, counts
    cells = pyramid_cell_indices(locations, pyramid)
    for col in range(cells.shape[1]):
        idx = cells[:, col]
        # sort once per grid; members are summed in input order within a cell
        order = np.argsort(idx, kind="stable")
        sorted_idx = idx[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        sums = np.add.reduceat(contrib[order], starts, axis=0)
        occupied = sorted_idx[starts]
        n = np.diff(np.r_[starts, len(idx)])
        blocks[occupied] = sums / n[:, None]
        counts[occupied] = n
    return blocks, counts


def pooled_encode(contributions, locations, pyramid: PyramidSpec) -> np.ndarray:
    """Concatenated per-cell averages, before any normalization."""
    blocks, _ = pooled_cells(contributions, locations, pyramid)
    return blocks.reshape(-1)


def representation_dim(dim: int, K: int, pyramid: PyramidSpec | None = None,
                       sted: bool = False, channels: int = 1) -> int:
    """Length of the final video representation (exact integer).

    With ``sted`` the descriptor grows by three location dimensions and the
    pyramid must be the single trivial cell.
    """
    if min(dim, K, channels) < 1:
        raise ValueError("dim, K and channels must be positive")
    if pyramid is None:
        pyramid = PyramidSpec.trivial()
    if sted and not pyramid.is_trivial:
        raise ValueError("STED encodings use the single 1x1x1 cell")
    return channels * pyramid.cells * 2 * K * (dim + (3 if sted else 0))

