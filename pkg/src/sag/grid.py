"""Patch grids, binary masks and per-patch mask-area ratios.

Patches are always indexed in row-major order; every other module
(features, guidance, attention) relies on that convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sag.io import atomic_write_text


class ShapeError(ValueError):
    """Raster dimensions do not match the patch grid."""


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_edge: int

    def __post_init__(self):
        for name in ("rows", "cols", "patch_edge"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def p(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_edge

    @property
    def width(self) -> int:
        return self.cols * self.patch_edge

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def row_col(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.p:
            raise IndexError(f"patch index {i} out of range [0, {self.p})")
        return divmod(int(i), self.cols)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"patch ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coarsen(self, factor: int) -> "PatchGrid":
        """Grid over the same raster with patches ``factor`` times larger."""
        if self.rows % factor or self.cols % factor:
            raise ShapeError(
                f"cannot coarsen {self.rows}x{self.cols} grid by factor {factor}"
            )
        return PatchGrid(self.rows // factor, self.cols // factor, self.patch_edge * factor)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "patch_edge": self.patch_edge}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGrid":
        return cls(int(d["rows"]), int(d["cols"]), int(d["patch_edge"]))


def check_raster(raster: np.ndarray, grid: PatchGrid, what: str = "raster") -> None:
    if raster.ndim != 2 or raster.shape != grid.shape:
        raise ShapeError(
            f"{what} has shape {tuple(raster.shape)}, expected {grid.shape} "
            f"(rows*patch_edge, cols*patch_edge) for grid "
            f"{grid.rows}x{grid.cols} with patch_edge={grid.patch_edge}"
        )


def as_binary_mask(data) -> np.ndarray:
    mask = np.asarray(data)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8)


def patch_bounds(grid: PatchGrid, i: int) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle ``(row0, col0, row1, col1)`` of patch ``i``."""
    r, c = grid.row_col(i)
    e = grid.patch_edge
    return r * e, c * e, (r + 1) * e, (c + 1) * e


def patch_counts(mask: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Integer count of set pixels per patch, row-major."""
    mask = as_binary_mask(mask)
    check_raster(mask, grid, "mask")
    e = grid.patch_edge
    blocks = mask.reshape(grid.rows, e, grid.cols, e).astype(np.int64)
    return blocks.sum(axis=(1, 3)).reshape(-1)


def patchify(mask: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Fraction of set pixels in each patch (the mask-area ratios)."""
    return patch_counts(mask, grid) / float(grid.patch_edge**2)


def block_mean(raster: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Per-patch mean of a real raster, row-major. Trailing axes are kept."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape[:2] != grid.shape:
        raise ShapeError(f"raster has shape {raster.shape[:2]}, expected {grid.shape}")
    e = grid.patch_edge
    rest = raster.shape[2:]
    blocks = raster.reshape(grid.rows, e, grid.cols, e, *rest)
    return blocks.mean(axis=(1, 3)).reshape(grid.p, *rest)


def upscale(values: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Nearest-neighbour expansion of a length-p vector to a full raster."""
    values = np.asarray(values)
    if values.shape != (grid.p,):
        raise ShapeError(f"expected {grid.p} patch values, got shape {values.shape}")
    e = grid.patch_edge
    block = values.reshape(grid.rows, grid.cols)
    return np.kron(block, np.ones((e, e), dtype=values.dtype))


# ---------------------------------------------------------------------------
# ASCII PGM ("P2")


def write_pgm(path, raster: np.ndarray, maxval: int | None = None) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ShapeError(f"PGM raster must be 2-D, got shape {raster.shape}")
    if maxval is None:
        maxval = max(1, int(raster.max()) if raster.size else 1)
    if raster.min() < 0 or raster.max() > maxval:
        raise ValueError(f"PGM values must lie in [0, {maxval}]")
    h, w = raster.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in raster]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read an ASCII PGM; returns ``(raster, maxval)``."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (missing P2 magic)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.int64)
    if values.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {values.size}")
    return values.reshape(h, w), maxval


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, as_binary_mask(mask), maxval=1)


def read_mask(path) -> np.ndarray:
    raster, maxval = read_pgm(path)
    if maxval != 1:
        raise ValueError(f"{path}: binary mask must have maxval 1, got {maxval}")
    return as_binary_mask(raster)

