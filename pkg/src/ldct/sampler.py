"""Contextual sub-data sampling of sinograms.

The sinogram is cut into non-overlapping 2x2 blocks.  Cells of a block are
numbered along the view axis first::

    index 0 = (v,   d)    index 1 = (v,   d+1)
    index 2 = (v+1, d)    index 3 = (v+1, d+1)

One index ``i`` is drawn uniformly per block and feeds slot 1.  Slots 2 and
3 take the contextual neighbours of ``i`` in ascending order:

    i = 0 -> (1, 2)    i = 1 -> (0, 2)    i = 2 -> (1, 3)    i = 3 -> (1, 2)

so the unused cell is 3, 3, 0, 0 respectively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import Sinogram
from .rng import make_rng

# (row offset, col offset) of each within-block index
CELL_OFFSETS = np.array([(0, 0), (0, 1), (1, 0), (1, 1)])
# slot cells (s1, s2, s3) for every drawn index i
SLOT_TABLE = np.array([(0, 1, 2), (1, 0, 2), (2, 1, 3), (3, 1, 2)])
UNUSED_CELL = np.array([3, 3, 0, 0])
ORDERED_PAIRS = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


@dataclass
class SubDataSet:
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    choice: np.ndarray  # drawn index i per block, shape (H/2, W/2)
    rng_seed: int | None = None

    @property
    def source_shape(self) -> tuple[int, int]:
        h, w = self.choice.shape
        return (2 * h, 2 * w)

    @property
    def cells(self) -> np.ndarray:
        """Within-block cell index per slot, shape (3, H/2, W/2)."""
        return np.moveaxis(SLOT_TABLE[self.choice], -1, 0)

    def slot(self, k: int) -> np.ndarray:
        return (self.s1, self.s2, self.s3)[k - 1]

    def provenance(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Full-resolution (row, col) index arrays that slot ``k`` reads."""
        if k not in (1, 2, 3):
            raise ValidationError(f"slot must be 1, 2 or 3, got {k}")
        return _gather_index(self.cells[k - 1])


def _gather_index(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = cells.shape
    br, bc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    off = CELL_OFFSETS[cells]
    return 2 * br + off[..., 0], 2 * bc + off[..., 1]


def draw_choice(shape, seed: int, stream=("sample",)) -> np.ndarray:
    h, w = shape
    if h % 2 or w % 2:
        raise ValidationError(f"sub-data sampling needs even dimensions, got {shape}")
    return make_rng(seed, *stream).integers(0, 4, size=(h // 2, w // 2))


def sample_subdata(sino, seed: int, stream=("sample",)) -> SubDataSet:
    data = sino.data if isinstance(sino, Sinogram) else np.asarray(sino)
    if data.ndim != 2:
        raise ValidationError("sample_subdata expects a 2-D array")
    choice = draw_choice(data.shape, seed, stream)
    sds = SubDataSet(None, None, None, choice, seed)
    sds.s1, sds.s2, sds.s3 = (data[sds.provenance(k)] for k in (1, 2, 3))
    return sds


def choose_pair(sds: SubDataSet | None, seed: int, stream=("pair",)) -> tuple[int, int]:
    """Ordered slot pair ``(i, j)``, ``i != j``, uniform over the 6 choices.

    Returns 1-based slot numbers; use ``sds.slot(i)`` for the arrays.
    """
    i, j = ORDERED_PAIRS[int(make_rng(seed, *stream).integers(0, 6))]
    return i + 1, j + 1


def subsample_like(full, sds: SubDataSet, k: int):
    """Gather ``full`` at the cells slot ``k`` of ``sds`` used.

    Works on numpy arrays and torch tensors; leading axes are kept.
    """
    if tuple(full.shape[-2:]) != sds.source_shape:
        raise ValidationError(f"array shape {tuple(full.shape[-2:])} does not match sub-data source {sds.source_shape}")
    rows, cols = sds.provenance(k)
    if not isinstance(full, np.ndarray):
        import torch
        rows, cols = torch.as_tensor(rows), torch.as_tensor(cols)
    return full[..., rows, cols]
