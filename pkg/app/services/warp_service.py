"""Bilinear warp as an explicit sparse operator U with exact transpose.

Row p of U gathers mov(p + d(p)). Pixels whose target leaves the raster keep an
identity row and are reported in ``out_of_view``.
"""
import logging
from typing import List, Sequence, TypeVar

import numpy as np
from scipy import sparse
from scipy.ndimage import map_coordinates

from app.errors import NonFiniteError, ShapeMismatchError
from app.models.raster_models import ComplexImage, DisplacementField, Image
from app.raster_io import PathLike, write_raster

logger = logging.getLogger(__name__)

Raster = TypeVar("Raster", Image, ComplexImage)


class WarpOperator:
    """Sparse (n_pixels x n_pixels) resampling matrix for one raster geometry."""

    def __init__(self, matrix: sparse.csr_matrix, out_of_view: np.ndarray):
        self.matrix = matrix.tocsr()
        self.transpose = self.matrix.T.tocsr()
        self.out_of_view = out_of_view
        self.shape = out_of_view.shape

    @property
    def n_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def entries(self) -> np.ndarray:
        """Triplets (out_index, in_index, weight) as a 3 x nnz float64 array."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.vstack([coo.row[order], coo.col[order], coo.data[order]]).astype(np.float64)

    @classmethod
    def identity(cls, rows: int, cols: int) -> "WarpOperator":
        return cls(sparse.identity(rows * cols, format="csr"), np.zeros((rows, cols), dtype=bool))


def build_warp(field: DisplacementField) -> WarpOperator:
    """
    Bilinear gather along ``field``; out-of-raster targets degenerate to identity rows.

    Args:
        field: Displacement with ref(p) ~= mov(p + d(p)); must be finite everywhere

    Returns:
        WarpOperator whose sparse matrix maps a moving frame onto the reference
        grid, together with its out-of-view mask

    Raises:
        NonFiniteError: the field holds NaN or infinite values
    """
    if not (np.all(np.isfinite(field.u_axial)) and np.all(np.isfinite(field.u_lateral))):
        raise NonFiniteError("cannot build a warp from a non-finite field")
    rows, cols = field.shape
    z, x = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    tz, tx = z + field.u_axial, x + field.u_lateral
    out_of_view = (tz < 0) | (tz > rows - 1) | (tx < 0) | (tx > cols - 1)

    # Lower tap clamped one short of the edge so exact hits on the last row/column
    # land on the upper tap with weight 1.
    z0 = np.clip(np.minimum(np.floor(tz), rows - 2), 0, None).astype(np.int64)
    x0 = np.clip(np.minimum(np.floor(tx), cols - 2), 0, None).astype(np.int64)
    fz, fx = tz - z0, tx - x0

    out_index = np.arange(rows * cols).reshape(rows, cols)
    taps = []
    for dz, dx, weight in (
        (0, 0, (1 - fz) * (1 - fx)),
        (0, 1, (1 - fz) * fx),
        (1, 0, fz * (1 - fx)),
        (1, 1, fz * fx),
    ):
        zi = np.minimum(z0 + dz, rows - 1)
        xi = np.minimum(x0 + dx, cols - 1)
        keep = ~out_of_view & (weight != 0)
        taps.append((out_index[keep], (zi * cols + xi)[keep], weight[keep]))
    taps.append((out_index[out_of_view], out_index[out_of_view], np.ones(int(out_of_view.sum()))))

    row_idx = np.concatenate([t[0] for t in taps])
    col_idx = np.concatenate([t[1] for t in taps])
    weights = np.concatenate([t[2] for t in taps])
    matrix = sparse.csr_matrix((weights, (row_idx, col_idx)), shape=(rows * cols, rows * cols))
    matrix.sum_duplicates()
    if out_of_view.any():
        logger.debug(f"Warp leaves {int(out_of_view.sum())} pixels out of view")
    return WarpOperator(matrix, out_of_view)


def _check(op: WarpOperator, img) -> None:
    if not isinstance(img, (Image, ComplexImage)):
        raise ShapeMismatchError(f"cannot warp a {type(img).__name__}")
    if img.shape != op.shape:
        raise ShapeMismatchError(f"image {img.shape} does not match operator {op.shape}")


def apply(op: WarpOperator, img: Raster) -> Raster:
    """U x."""
    _check(op, img)
    return img.with_data((op.matrix @ img.data.ravel()).reshape(op.shape))


def apply_adjoint(op: WarpOperator, img: Raster) -> Raster:
    """U^T y, the scatter of each pixel back to where its samples came from."""
    _check(op, img)
    return img.with_data((op.transpose @ img.data.ravel()).reshape(op.shape))


# ==================== COMPOSITION ====================

def _sample(plane: np.ndarray, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    return map_coordinates(plane, [z, x], order=1, mode="nearest")


def invert_field(field: DisplacementField, iterations: int = 30) -> DisplacementField:
    """v with v(q) = -u(q + v(q)), so that warping by u and then v is the identity."""
    rows, cols = field.shape
    z, x = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    v_a, v_l = -field.u_axial, -field.u_lateral
    for _ in range(iterations):
        tz, tx = z + v_a, x + v_l
        v_a, v_l = -_sample(field.u_axial, tz, tx), -_sample(field.u_lateral, tz, tx)
    return DisplacementField(v_a, v_l, field.valid)


def _chain(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """outer(p) + inner(p + outer(p))."""
    rows, cols = outer.shape
    z, x = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    tz, tx = z + outer.u_axial, x + outer.u_lateral
    return DisplacementField(
        outer.u_axial + _sample(inner.u_axial, tz, tx),
        outer.u_lateral + _sample(inner.u_lateral, tz, tx),
        outer.valid & inner.valid,
    )


def compose_fields_to_reference(fields: Sequence[DisplacementField],
                                reference_index: int) -> List[DisplacementField]:
    """Accumulate pairwise fields (frame i -> i + 1) into reference -> frame displacements.

    Entry t satisfies frame_ref(p) ~= frame_t(p + D_t(p)); the reference entry is zero.
    """
    n_frames = len(fields) + 1
    if not 0 <= reference_index < n_frames:
        raise ShapeMismatchError(f"reference_index {reference_index} outside [0, {n_frames})")
    rows, cols = fields[0].shape
    composed: List[DisplacementField] = [None] * n_frames
    composed[reference_index] = DisplacementField.zeros(rows, cols)
    for t in range(reference_index + 1, n_frames):
        composed[t] = _chain(composed[t - 1], fields[t - 1])
    for t in range(reference_index - 1, -1, -1):
        composed[t] = _chain(composed[t + 1], invert_field(fields[t]))
    return composed


def compose_to_reference(fields: Sequence[DisplacementField], reference_index: int) -> List[WarpOperator]:
    """One warp per frame bringing it onto the reference frame's grid."""
    composed = compose_fields_to_reference(fields, reference_index)
    rows, cols = composed[0].shape
    return [
        WarpOperator.identity(rows, cols) if t == reference_index else build_warp(field)
        for t, field in enumerate(composed)
    ]


def write_warp_triplets(op: WarpOperator, path: PathLike) -> None:
    write_raster(op.entries, path)
