"""Multi-pass NCC block matching with Gaussian sub-pixel regression.

Field convention shared with the warp stage: ref(p) ~= mov(p + d(p)).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

from app.config import settings
from app.errors import ShapeMismatchError
from app.models.config_models import FlowConfig
from app.models.raster_models import DisplacementField, Image

logger = logging.getLogger(__name__)

PERFECT_NCC = 1.0 - 1e-12
CLAMP = 0.99
MAD_TO_STD = 1.4826
MIN_PROMINENCE_SAMPLES = 25


@dataclass(frozen=True)
class BlockGridField:
    """Displacement estimates at block-centre resolution.

    center_rows/center_cols are the lattice coordinates; every other plane has
    shape (len(center_rows), len(center_cols)). Invalid cells hold zero displacement.
    """
    center_rows: np.ndarray
    center_cols: np.ndarray
    du_axial: np.ndarray
    du_lateral: np.ndarray
    ncc_peak: np.ndarray
    valid: np.ndarray
    flagged: Optional[np.ndarray] = None
    filled: Optional[np.ndarray] = None
    warning: bool = False

    def __post_init__(self):
        shape = (len(self.center_rows), len(self.center_cols))
        valid = np.asarray(self.valid, dtype=bool)
        for name in ("du_axial", "du_lateral", "ncc_peak"):
            if np.shape(getattr(self, name)) != shape:
                raise ShapeMismatchError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "du_axial", np.where(valid, self.du_axial, 0.0))
        object.__setattr__(self, "du_lateral", np.where(valid, self.du_lateral, 0.0))
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(shape, dtype=bool))
        if self.filled is None:
            object.__setattr__(self, "filled", np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.du_axial.shape


class SubpixelPeak(NamedTuple):
    axial: float
    lateral: float
    flagged: bool


# ==================== CORRELATION ====================

def _window_sums(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sums over every h x w window that fits inside a (summed-area table)."""
    table = np.pad(a.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
    return table[h:, w:] - table[:-h, w:] - table[h:, :-w] + table[:-h, :-w]


def ncc_surface(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Zero-normalized cross-correlation of template at every valid offset in region (FFT)."""
    h, w = template.shape
    n = h * w
    centered = template - template.mean()
    energy = float((centered ** 2).sum())
    if energy <= 1e-12 * n:
        return np.zeros((region.shape[0] - h + 1, region.shape[1] - w + 1))
    numerator = fftconvolve(region, centered[::-1, ::-1], mode="valid")
    sums = _window_sums(region, h, w)
    squares = _window_sums(region ** 2, h, w)
    variance = squares - sums ** 2 / n
    ok = variance > 1e-12 * n
    surface = np.zeros_like(numerator)
    surface[ok] = numerator[ok] / np.sqrt(energy * variance[ok])
    return surface


def ncc_surface_direct(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Same as ncc_surface by explicit summation; the reference the FFT path is checked against."""
    h, w = template.shape
    t = template - template.mean()
    t_norm = math.sqrt(float((t ** 2).sum()))
    out = np.zeros((region.shape[0] - h + 1, region.shape[1] - w + 1))
    for a in range(out.shape[0]):
        for b in range(out.shape[1]):
            patch = region[a:a + h, b:b + w]
            p = patch - patch.mean()
            p_norm = math.sqrt(float((p ** 2).sum()))
            if t_norm > 0 and p_norm > 0:
                out[a, b] = float((t * p).sum()) / (t_norm * p_norm)
    return out


# ==================== SUB-PIXEL ====================

def _three_point(minus: float, centre: float, plus: float, logarithmic: bool) -> float:
    if logarithmic:
        minus, centre, plus = math.log(minus), math.log(centre), math.log(plus)
    denominator = 2 * minus - 4 * centre + 2 * plus
    if denominator == 0:
        return 0.0
    return (minus - plus) / denominator


def _axis_fit(minus: float, centre: float, plus: float, method: str) -> float:
    if method != "parabolic" and min(minus, centre, plus) > 0:
        return _three_point(minus, centre, plus, logarithmic=True)
    return _three_point(minus, centre, plus, logarithmic=False)


_OFFSETS = np.array([(dz, dx) for dz in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)
_DESIGN = np.column_stack([
    np.ones(9), _OFFSETS[:, 0], _OFFSETS[:, 1],
    _OFFSETS[:, 0] ** 2, _OFFSETS[:, 1] ** 2, _OFFSETS[:, 0] * _OFFSETS[:, 1],
])


def _gauss2d(neighborhood: np.ndarray) -> Optional[Tuple[float, float]]:
    """Least-squares quadratic fit of ln C over all 9 samples; None if not a maximum."""
    if np.any(neighborhood <= 0):
        return None
    coeffs, *_ = np.linalg.lstsq(_DESIGN, np.log(neighborhood).ravel(), rcond=None)
    _, b, c, d, e, f = coeffs
    if d >= 0 or e >= 0 or 4 * d * e - f * f <= 0:
        return None
    dz, dx = np.linalg.solve(np.array([[2 * d, f], [f, 2 * e]]), -np.array([b, c]))
    return float(dz), float(dx)


def subpixel_peak(neighborhood: np.ndarray, method: str = "gauss2d") -> SubpixelPeak:
    """Refine an integer correlation peak from its 3x3 neighbourhood.

    Falls back gauss2d -> gauss1x1d -> parabolic whenever a fit is not defined.
    Offsets of one pixel or more are clamped to +-0.99 and flagged.
    """
    neighborhood = np.asarray(neighborhood, dtype=np.float64)
    if neighborhood.shape != (3, 3):
        raise ShapeMismatchError(f"neighbourhood must be 3x3, got {neighborhood.shape}")

    fit = _gauss2d(neighborhood) if method == "gauss2d" else None
    if fit is None:
        column, row = neighborhood[:, 1], neighborhood[1, :]
        fit = (_axis_fit(*column, method), _axis_fit(*row, method))
    return _clamped(*fit)


def _clamped(axial: float, lateral: float) -> SubpixelPeak:
    flagged = False
    result = []
    for delta in (axial, lateral):
        if abs(delta) >= 1:
            delta = math.copysign(CLAMP, delta)
            flagged = True
        result.append(delta)
    return SubpixelPeak(result[0], result[1], flagged)


# ==================== BLOCK MATCHING ====================

def block_starts(length: int, window: int, overlap: int) -> np.ndarray:
    if window > length:
        raise ShapeMismatchError(f"window {window} does not fit in {length} pixels")
    return np.arange(0, length - window + 1, window - overlap)


class _BlockResult(NamedTuple):
    du_axial: float
    du_lateral: float
    ncc: float
    valid: bool
    flagged: bool


_INVALID = _BlockResult(0.0, 0.0, 0.0, False, False)


def _match_block(ref: np.ndarray, mov: np.ndarray, start: Tuple[int, int], window: int,
                 offset: Tuple[int, int], margin: int, cfg: FlowConfig) -> _BlockResult:
    rows, cols = mov.shape
    (s_r, s_c), (d_r, d_c) = start, offset
    lo_r, hi_r = max(-margin, -(s_r + d_r)), min(margin, rows - window - s_r - d_r)
    lo_c, hi_c = max(-margin, -(s_c + d_c)), min(margin, cols - window - s_c - d_c)
    if lo_r > hi_r or lo_c > hi_c:
        return _INVALID

    template = ref[s_r:s_r + window, s_c:s_c + window]
    centered = template - template.mean()
    if float((centered ** 2).sum()) <= 1e-12 * template.size:
        return _INVALID
    top, left = s_r + d_r + lo_r, s_c + d_c + lo_c
    region = mov[top:s_r + d_r + hi_r + window, left:s_c + d_c + hi_c + window]
    surface = ncc_surface(template, region)
    a, b = np.unravel_index(int(np.argmax(surface)), surface.shape)
    last_r, last_c = surface.shape[0] - 1, surface.shape[1] - 1

    peak = ncc_surface_direct(template, region[a:a + window, b:b + window])[0, 0]
    int_r, int_c = d_r + lo_r + a, d_c + lo_c + b
    if peak >= PERFECT_NCC:
        return _BlockResult(float(int_r), float(int_c), peak, True, False)

    # Only the +-margin limit is a search border; an edge clipped by the image is not.
    at_limit = (
        (a == 0 and lo_r == -margin) or (a == last_r and hi_r == margin)
        or (b == 0 and lo_c == -margin) or (b == last_c and hi_c == margin)
    )
    accepted = peak >= cfg.min_ncc or _prominent(surface, peak, cfg.peak_prominence)
    if at_limit or not accepted:
        return _BlockResult(0.0, 0.0, peak, False, False)

    if 0 < a < last_r and 0 < b < last_c:
        neighborhood = ncc_surface_direct(template, region[a - 1:a + window + 1, b - 1:b + window + 1])
        fit = subpixel_peak(neighborhood, cfg.peak_fit)
    else:
        fit = _edge_fit(template, region, (a, b), (last_r, last_c), cfg.peak_fit)
    return _BlockResult(int_r + fit.axial, int_c + fit.lateral, peak, True, fit.flagged)


def _prominent(surface: np.ndarray, peak: float, threshold: float) -> bool:
    """Peak stands ``threshold`` robust deviations above the rest of the correlation surface."""
    if threshold <= 0 or surface.size < MIN_PROMINENCE_SAMPLES:
        return False
    median = float(np.median(surface))
    spread = MAD_TO_STD * float(np.median(np.abs(surface - median)))
    return spread > 0 and peak - median >= threshold * spread


def _edge_fit(template: np.ndarray, region: np.ndarray, position: Tuple[int, int],
              last: Tuple[int, int], method: str) -> SubpixelPeak:
    """Per-axis refinement; an axis whose peak sits on a clipped edge keeps its integer offset."""
    (a, b), (last_r, last_c) = position, last
    h, w = template.shape
    axial = lateral = 0.0
    if 0 < a < last_r:
        column = ncc_surface_direct(template, region[a - 1:a + h + 1, b:b + w])[:, 0]
        axial = _axis_fit(*column, method)
    if 0 < b < last_c:
        row = ncc_surface_direct(template, region[a:a + h, b - 1:b + w + 1])[0, :]
        lateral = _axis_fit(*row, method)
    return _clamped(axial, lateral)


def ncc_match_pass(ref: Image, mov: Image, window: int, overlap: int,
                   init: Union[BlockGridField, DisplacementField, None] = None,
                   cfg: Optional[FlowConfig] = None, margin: Optional[int] = None) -> BlockGridField:
    """One block-matching pass; windows in mov are pre-shifted by the rounded init estimate."""
    if ref.shape != mov.shape:
        raise ShapeMismatchError(f"reference {ref.shape} and moving {mov.shape} images differ")
    cfg = cfg or FlowConfig()
    margin = cfg.margin_for(0) if margin is None else margin
    rows, cols = ref.shape
    starts_r, starts_c = block_starts(rows, window, overlap), block_starts(cols, window, overlap)
    centers_r, centers_c = starts_r + window // 2, starts_c + window // 2

    if isinstance(init, BlockGridField):
        init = upsample_field(init, rows, cols)
    blocks = []
    for s_r, c_r in zip(starts_r, centers_r):
        for s_c, c_c in zip(starts_c, centers_c):
            offset = (0, 0)
            if init is not None:
                offset = (int(round(init.u_axial[c_r, c_c])), int(round(init.u_lateral[c_r, c_c])))
            blocks.append(((int(s_r), int(s_c)), offset))

    def run(block):
        return _match_block(ref.data, mov.data, block[0], window, block[1], margin, cfg)

    workers = max(settings.WORKERS, 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, blocks))
    else:
        results = [run(block) for block in blocks]

    shape = (len(starts_r), len(starts_c))
    planes = np.array(results, dtype=np.float64).reshape(shape + (5,))
    grid = BlockGridField(
        center_rows=centers_r,
        center_cols=centers_c,
        du_axial=planes[..., 0],
        du_lateral=planes[..., 1],
        ncc_peak=planes[..., 2],
        valid=planes[..., 3].astype(bool),
        flagged=planes[..., 4].astype(bool),
    )
    logger.debug(
        f"Pass window={window} overlap={overlap}: {int(grid.valid.sum())}/{grid.valid.size} valid, "
        f"{int(grid.flagged.sum())} clamped peaks"
    )
    return grid


# ==================== VALIDATION ====================

def _neighbours(shape: Tuple[int, int], i: int, j: int, radius: int):
    for a in range(max(i - radius, 0), min(i + radius + 1, shape[0])):
        for b in range(max(j - radius, 0), min(j + radius + 1, shape[1])):
            if (a, b) != (i, j):
                yield a, b


def fill_and_smooth(grid: BlockGridField, cfg: Optional[FlowConfig] = None) -> BlockGridField:
    """Median-test outliers, then fill invalid cells by inverse-distance averaging."""
    cfg = cfg or FlowConfig()
    radius = cfg.outlier_median_radius
    shape = grid.shape
    u_a, u_l = grid.du_axial.copy(), grid.du_lateral.copy()
    valid = grid.valid.copy()

    outliers = np.zeros(shape, dtype=bool)
    for i, j in zip(*np.nonzero(grid.valid)):
        near = [(a, b) for a, b in _neighbours(shape, i, j, radius) if grid.valid[a, b]]
        if not near:
            continue
        idx = tuple(np.array(near).T)
        deviation = math.hypot(u_a[i, j] - np.median(grid.du_axial[idx]), u_l[i, j] - np.median(grid.du_lateral[idx]))
        outliers[i, j] = deviation > cfg.outlier_tol
    valid &= ~outliers

    if not valid.any():
        logger.warning("Every block failed validation; returning the grid unfilled")
        return replace(grid, valid=valid, warning=True)

    filled = ~valid
    search = radius
    while not valid.all():
        new_a, new_l, new_valid = u_a.copy(), u_l.copy(), valid.copy()
        for i, j in zip(*np.nonzero(~valid)):
            near = [(a, b) for a, b in _neighbours(shape, i, j, search) if valid[a, b]]
            if not near:
                continue
            weights = np.array([1.0 / math.hypot(a - i, b - j) for a, b in near])
            idx = tuple(np.array(near).T)
            new_a[i, j] = float(np.dot(weights, u_a[idx]) / weights.sum())
            new_l[i, j] = float(np.dot(weights, u_l[idx]) / weights.sum())
            new_valid[i, j] = True
        if (new_valid == valid).all():
            search += 1
            continue
        u_a, u_l, valid = new_a, new_l, new_valid

    if outliers.any():
        logger.debug(f"Replaced {int(outliers.sum())} outlier blocks")
    return replace(grid, du_axial=u_a, du_lateral=u_l, valid=valid, filled=filled | grid.filled)


# ==================== DENSE FIELD ====================

def _bracket(centres: np.ndarray, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lower lattice index and clamped fraction of each coordinate."""
    index = np.clip(np.searchsorted(centres, coords, side="right") - 1, 0, len(centres) - 2)
    span = (centres[index + 1] - centres[index]).astype(np.float64)
    frac = np.clip((coords - centres[index]) / span, 0.0, 1.0)
    return index, frac


def upsample_field(grid: BlockGridField, rows: int, cols: int) -> DisplacementField:
    """Bilinear interpolation from block centres to every pixel, clamped at the edges."""
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ShapeMismatchError(f"need at least a 2x2 block grid to upsample, got {grid.shape}")
    i, fz = _bracket(np.asarray(grid.center_rows), np.arange(rows))
    j, fx = _bracket(np.asarray(grid.center_cols), np.arange(cols))
    i, fz = i[:, None], fz[:, None]
    j, fx = j[None, :], fx[None, :]

    def interpolate(plane):
        return ((1 - fz) * (1 - fx) * plane[i, j] + (1 - fz) * fx * plane[i, j + 1]
                + fz * (1 - fx) * plane[i + 1, j] + fz * fx * plane[i + 1, j + 1])

    valid = grid.valid[i, j] & grid.valid[i, j + 1] & grid.valid[i + 1, j] & grid.valid[i + 1, j + 1]
    return DisplacementField(interpolate(grid.du_axial), interpolate(grid.du_lateral), valid)


def estimate_flow(ref: Image, mov: Image, cfg: Optional[FlowConfig] = None) -> DisplacementField:
    """
    Dense displacement from ``ref`` to ``mov`` by coarse-to-fine block matching.

    Each pass is seeded with the previous pass's dense field. A refinement pass
    in which no block validates keeps the field of the pass before it.

    Args:
        ref: Reference image
        mov: Moving image of the same shape
        cfg: Pass windows, search margins and validation thresholds

    Returns:
        DisplacementField with ref(p) ~= mov(p + d(p)); pixels no valid block
        supports are flagged invalid
    """
    cfg = cfg or FlowConfig()
    if ref.shape != mov.shape:
        raise ShapeMismatchError(f"reference {ref.shape} and moving {mov.shape} images differ")
    field = None
    for index, (window, overlap) in enumerate(cfg.pass_windows):
        grid = ncc_match_pass(ref, mov, window, overlap, field, cfg, cfg.margin_for(index))
        grid = fill_and_smooth(grid, cfg)
        if grid.warning and field is not None:
            logger.warning(f"No block validated in pass {index + 1} (window {window}); keeping the previous field")
            continue
        field = upsample_field(grid, ref.rows, ref.cols)
    return field


class FlowService:
    """Pairwise flow along a frame sequence."""

    def __init__(self, cfg: Optional[FlowConfig] = None):
        self.cfg = cfg or FlowConfig()

    def pairwise(self, frames) -> list:
        fields = []
        for index in range(len(frames) - 1):
            fields.append(estimate_flow(frames[index], frames[index + 1], self.cfg))
            logger.debug(f"Flow {index}->{index + 1} done")
        return fields
