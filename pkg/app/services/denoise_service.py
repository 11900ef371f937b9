"""Collaborative denoising of a motion-compensated stack with spatio-temporal blocks.

Every block spans all frames. Similar blocks are grouped within a local search
window, shrunk jointly in a separable transform (2D DCT over space, Haar over time
and over the group) and aggregated back with Kaiser-windowed weights.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dctn, idctn

from app.config import settings
from app.errors import ShapeMismatchError, TilingError
from app.models.config_models import DenoiseConfig
from app.models.raster_models import FrameStack, Image

logger = logging.getLogger(__name__)

KAISER_BETA = 2.0
MAD_SCALE = 0.6745

Coord = Tuple[int, int]


@dataclass(frozen=True)
class BlockGroup:
    """Reference block first, then members by ascending distance. data is (b, b, T, K)."""
    reference: Coord
    members: Tuple[Coord, ...]
    distances: Tuple[float, ...]
    data: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


# ==================== NOISE LEVEL ====================

def estimate_sigma(stack: FrameStack) -> float:
    """Median absolute deviation of the diagonal Haar detail band of frame 0."""
    frame = stack[0].data
    rows, cols = frame.shape[0] // 2 * 2, frame.shape[1] // 2 * 2
    if rows == 0 or cols == 0:
        return 0.0
    x = frame[:rows, :cols]
    detail = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2
    return float(np.median(np.abs(detail)) / MAD_SCALE)


# ==================== TRANSFORMS ====================

@lru_cache(maxsize=None)
def haar_matrix(size: int) -> np.ndarray:
    """Orthonormal Haar analysis matrix for a power-of-two length."""
    if size < 1 or size & (size - 1):
        raise ValueError(f"Haar length must be a power of two, got {size}")
    matrix = np.ones((1, 1))
    while matrix.shape[0] < size:
        n = matrix.shape[0]
        matrix = np.vstack([np.kron(matrix, [1.0, 1.0]), np.kron(np.eye(n), [1.0, -1.0])]) / np.sqrt(2.0)
    return matrix


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _haar_forward(data: np.ndarray, axis: int) -> np.ndarray:
    length = data.shape[axis]
    padded_length = _next_pow2(length)
    if padded_length != length:
        pad = [(0, 0)] * data.ndim
        pad[axis] = (0, padded_length - length)
        data = np.pad(data, pad, mode="symmetric")
    return np.moveaxis(np.tensordot(haar_matrix(padded_length), data, axes=([1], [axis])), 0, axis)


def _haar_inverse(coeffs: np.ndarray, axis: int, length: int) -> np.ndarray:
    matrix = haar_matrix(coeffs.shape[axis])
    data = np.moveaxis(np.tensordot(matrix.T, coeffs, axes=([1], [axis])), 0, axis)
    return np.take(data, np.arange(length), axis=axis)


def group_transform(data: np.ndarray) -> np.ndarray:
    """(b, b, T, K) group -> coefficients (b, b, T', K'), T' and K' padded to powers of two."""
    coeffs = dctn(data, axes=(0, 1), norm="ortho")
    return _haar_forward(_haar_forward(coeffs, 2), 3)


def group_inverse(coeffs: np.ndarray, frames: int, members: int) -> np.ndarray:
    data = _haar_inverse(_haar_inverse(coeffs, 3, members), 2, frames)
    return idctn(data, axes=(0, 1), norm="ortho")


# ==================== GROUPING ====================

def block_lattice(length: int, block: int, step: int) -> List[int]:
    """Reference positions every ``step`` pixels, always including the last full block."""
    if block > length:
        raise ShapeMismatchError(f"block {block} does not fit in {length} pixels")
    positions = list(range(0, length - block + 1, step))
    if positions[-1] != length - block:
        positions.append(length - block)
    return positions


def _blocks_at(data: np.ndarray, coords: Sequence[Coord], block: int) -> np.ndarray:
    """Stack (T, rows, cols) -> (len(coords), T, b, b)."""
    return np.stack([data[:, r:r + block, c:c + block] for r, c in coords])


def group_blocks(stack, ref_coord: Coord, cfg: Optional[DenoiseConfig] = None,
                 mask: Optional[np.ndarray] = None, source: Optional[np.ndarray] = None) -> BlockGroup:
    """Rank lattice blocks near ``ref_coord`` by masked mean squared distance.

    ``stack`` is a FrameStack or a (T, rows, cols) array. ``source`` supplies the
    data the distances are computed on (the pilot estimate in the Wiener stage).
    Blocks touching out-of-view pixels are not candidates; the reference always is.
    """
    cfg = cfg or DenoiseConfig()
    data = stack.as_array() if isinstance(stack, FrameStack) else np.asarray(stack)
    source = data if source is None else source
    _, rows, cols = data.shape
    b = cfg.block
    mask = np.zeros(data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    reach = cfg.search_window // 2
    r0, c0 = ref_coord
    candidates = [
        (r, c)
        for r in block_lattice(rows, b, cfg.step) if abs(r - r0) <= reach
        for c in block_lattice(cols, b, cfg.step) if abs(c - c0) <= reach
        if (r, c) == ref_coord or not mask[:, r:r + b, c:c + b].any()
    ]
    if ref_coord not in candidates:
        candidates.insert(0, ref_coord)

    reference = source[:, r0:r0 + b, c0:c0 + b]
    weight = (~mask[:, r0:r0 + b, c0:c0 + b]).astype(np.float64)
    count = weight.sum()
    blocks = _blocks_at(source, candidates, b)
    if count > 0:
        distances = ((blocks - reference) ** 2 * weight).sum(axis=(1, 2, 3)) / count
    else:
        distances = np.zeros(len(candidates))
    distances[candidates.index(ref_coord)] = -1.0

    order = np.argsort(distances, kind="stable")[: cfg.max_group]
    members = tuple(candidates[i] for i in order)
    group_data = np.transpose(_blocks_at(data, members, b), (2, 3, 1, 0))
    kept = tuple(0.0 if i == 0 else float(distances[j]) for i, j in enumerate(order))
    return BlockGroup(ref_coord, members, kept, group_data)


# ==================== SHRINKAGE ====================

def shrink_group_hard(group: BlockGroup, sigma: float, hard_lambda: float = 2.7) -> Tuple[np.ndarray, int]:
    """Hard-threshold the group spectrum; the overall DC coefficient always survives."""
    frames, members = group.data.shape[2], group.data.shape[3]
    coeffs = group_transform(group.data)
    dc = coeffs[0, 0, 0, 0]
    coeffs[np.abs(coeffs) < hard_lambda * sigma] = 0.0
    coeffs[0, 0, 0, 0] = dc
    nonzero = int(np.count_nonzero(coeffs))
    return group_inverse(coeffs, frames, members), nonzero


def shrink_group_wiener(group: BlockGroup, pilot: np.ndarray, sigma: float) -> Tuple[np.ndarray, float]:
    """Empirical Wiener shrinkage with the pilot group as the signal estimate."""
    frames, members = group.data.shape[2], group.data.shape[3]
    coeffs = group_transform(group.data)
    power = group_transform(pilot) ** 2
    if sigma > 0:
        gains = power / (power + sigma ** 2)
    else:
        gains = np.ones_like(power)
    gains[0, 0, 0, 0] = 1.0
    return group_inverse(coeffs * gains, frames, members), float((gains ** 2).sum())


# ==================== AGGREGATION ====================

def aggregate(groups: Sequence[BlockGroup], estimates: Sequence[np.ndarray],
              weights: Sequence[float], template: FrameStack) -> FrameStack:
    """Weighted, Kaiser-tapered average of every group member written back in place."""
    frames = len(template)
    rows, cols = template.shape
    numerator = np.zeros((frames, rows, cols))
    denominator = np.zeros((frames, rows, cols))
    for group, estimate, weight in zip(groups, estimates, weights):
        b = estimate.shape[0]
        window = np.outer(np.kaiser(b, KAISER_BETA), np.kaiser(b, KAISER_BETA)) * weight
        for k, (r, c) in enumerate(group.members):
            numerator[:, r:r + b, c:c + b] += np.transpose(estimate[:, :, :, k], (2, 0, 1)) * window
            denominator[:, r:r + b, c:c + b] += window
    if np.any(denominator <= 0):
        raise TilingError(f"{int((denominator <= 0).sum())} pixels are not covered by any block")
    return template.with_frames([
        frame.with_data(plane) for frame, plane in zip(template, numerator / denominator)
    ])


# ==================== FULL STACK ====================

def _map_ordered(function, items):
    workers = max(settings.WORKERS, 1)
    if workers == 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(function, items))


def _weight(sigma: float, retained: float) -> float:
    """Aggregation weight 1 / (sigma^2 * retained), retained being the surviving coefficient count or gain energy."""
    retained = max(float(retained), 1.0)
    return 1.0 / (sigma ** 2 * retained) if sigma > 0 else 1.0 / retained


def denoise_stack(stack: FrameStack, mask: Optional[np.ndarray] = None,
                  cfg: Optional[DenoiseConfig] = None) -> FrameStack:
    """
    Hard-threshold stage, optionally followed by a Wiener stage on its output.

    Args:
        stack: Aligned log-compressed frames, at least two
        mask: Out-of-view flags per frame, shape (T, rows, cols); flagged pixels
            are never grouped and are restored from the input at the end
        cfg: Block geometry, grouping and shrinkage settings; sigma "auto" is
            estimated from frame 0 of ``stack``

    Returns:
        FrameStack with the same frames, timestamps and pixel pitch
    """
    cfg = cfg or DenoiseConfig()
    if not isinstance(stack[0], Image):
        raise ShapeMismatchError("denoising expects real-valued Image frames")
    data = stack.as_array()
    frames, rows, cols = data.shape
    mask = np.zeros(data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != data.shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match stack {data.shape}")
    sigma = estimate_sigma(stack) if cfg.sigma == "auto" else float(cfg.sigma)
    references = [
        (r, c)
        for r in block_lattice(rows, cfg.block, cfg.step)
        for c in block_lattice(cols, cfg.block, cfg.step)
    ]
    logger.info(f"Denoising {frames} frames of {rows}x{cols}, sigma={sigma:.4g}, {len(references)} reference blocks")

    def hard(coord):
        group = group_blocks(data, coord, cfg, mask)
        estimate, nonzero = shrink_group_hard(group, sigma, cfg.hard_lambda)
        return group, estimate, _weight(sigma, nonzero)

    results = _map_ordered(hard, references)
    basic = aggregate([r[0] for r in results], [r[1] for r in results], [r[2] for r in results], stack)

    if cfg.wiener_stage:
        pilot = basic.as_array()

        def wiener(coord):
            group = group_blocks(data, coord, cfg, mask, source=pilot)
            pilot_group = np.transpose(_blocks_at(pilot, group.members, cfg.block), (2, 3, 1, 0))
            estimate, energy = shrink_group_wiener(group, pilot_group, sigma)
            return group, estimate, _weight(sigma, energy)

        results = _map_ordered(wiener, references)
        basic = aggregate([r[0] for r in results], [r[1] for r in results], [r[2] for r in results], stack)

    output = np.where(mask, data, basic.as_array())
    return stack.with_frames([frame.with_data(plane) for frame, plane in zip(stack, output)])
