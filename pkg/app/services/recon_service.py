"""Spectral-domain reconstruction: inverse FFT, negative-delay suppression and ISAM refocusing."""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from app.config import settings
from app.errors import ConfigError, IsamGridError, ShapeMismatchError
from app.models.config_models import IsamConfig
from app.models.raster_models import ComplexImage, SpectralFrame
from app.services.nufft import kaiser_bessel_beta, nonuniform_ifft

logger = logging.getLogger(__name__)


def reconstruct_ifft(frame: SpectralFrame) -> ComplexImage:
    """Inverse DFT along k for every A-scan; keeps the n_k/2 positive-delay rows."""
    if frame.n_k % 2:
        raise ShapeMismatchError(f"n_k must be even for reconstruction, got {frame.n_k}")
    depth = np.fft.ifft(frame.data, axis=0)[: frame.n_k // 2]
    return ComplexImage(depth, frame.axial_pitch, frame.pixel_pitch_lateral)


def suppress_negative_delay(frame: SpectralFrame, guard_rows: int = 0) -> SpectralFrame:
    """Zero the negative optical delays beyond ``guard_rows`` and return to the k domain.

    Stand-in for full dispersion-encoded artifact removal: content mirrored into the
    negative delays (e.g. a glass interface) is cancelled, positive delays pass through.
    """
    half = frame.n_k // 2
    if not 0 <= guard_rows < half:
        raise ConfigError(f"guard_rows must be in [0, {half}), got {guard_rows}")
    full_range = np.fft.ifft(frame.data, axis=0)
    delay = frame.n_k - np.arange(frame.n_k)  # negative delay magnitude for rows >= half
    negative = (np.arange(frame.n_k) >= half) & (delay > guard_rows)
    full_range[negative] = 0.0
    return frame.with_data(np.fft.fft(full_range, axis=0))


def isam_resample(frame: SpectralFrame, cfg: IsamConfig) -> ComplexImage:
    """Refocus a B-scan by resampling onto the dispersion relation q_z = sqrt(4k^2 - q_x^2).

    Per lateral frequency, the samples at q_z(k) are gridded straight into the depth
    domain (type-1 NUFFT) with the Jacobian 2k/q_z; the focal plane is moved to zero
    delay before resampling and back afterwards. At q_x = 0 this is reconstruct_ifft.
    """
    if frame.n_k % 2:
        raise ShapeMismatchError(f"n_k must be even for reconstruction, got {frame.n_k}")
    if not (np.isclose(cfg.k_min, frame.k_min, rtol=1e-9) and np.isclose(cfg.k_max, frame.k_max, rtol=1e-9)):
        raise ConfigError(
            f"ISAM k range ({cfg.k_min}, {cfg.k_max}) does not match the frame ({frame.k_min}, {frame.k_max})"
        )
    if frame.k_min <= 0 or (frame.k_max - frame.k_min) <= 1e-9 * frame.k_max or frame.n_k < 4:
        raise IsamGridError(
            f"degenerate q_z grid for k in [{frame.k_min}, {frame.k_max}] with {frame.n_k} samples"
        )

    k = frame.wavenumbers[:, None]
    q = 2 * np.pi * np.fft.fftfreq(frame.n_x, d=frame.pixel_pitch_lateral)[None, :]
    z_focus = cfg.focus_row * frame.axial_pitch

    lateral = np.fft.fft(frame.data.astype(np.complex128), axis=1)
    propagating = 4 * k ** 2 > q ** 2
    if not propagating.any():
        raise IsamGridError("every spectral sample is evanescent")
    q_z = np.sqrt(np.where(propagating, 4 * k ** 2 - q ** 2, 4 * k ** 2))
    nodes = (q_z - 2 * frame.k_min) / (2 * frame.dk)
    coeffs = lateral * (2 * k / q_z) * np.exp(1j * (2 * k - q_z) * z_focus)
    coeffs = np.where(propagating, coeffs, 0.0)

    beta = cfg.kernel_beta or kaiser_bessel_beta(cfg.kernel_width, cfg.nufft_oversampling)
    columns = _grid_columns(nodes.T, coeffs.T, frame.n_k, cfg, beta)
    depth = np.fft.ifft(columns.T, axis=1)[: frame.n_k // 2]
    logger.debug(f"ISAM resampled {frame.n_x} columns, focus at row {cfg.focus_row}")
    return ComplexImage(depth, frame.axial_pitch, frame.pixel_pitch_lateral)


def _grid_columns(nodes: np.ndarray, coeffs: np.ndarray, n: int, cfg: IsamConfig, beta: float) -> np.ndarray:
    """Column-parallel NUFFT; each chunk is independent, results kept in column order."""
    workers = max(settings.WORKERS, 1)
    chunks = np.array_split(np.arange(nodes.shape[0]), workers)

    def run(index):
        return nonuniform_ifft(nodes[index], coeffs[index], n, cfg.nufft_oversampling, cfg.kernel_width, beta)

    if workers == 1:
        return run(chunks[0])
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return np.concatenate(list(executor.map(run, chunks)), axis=0)


class ReconService:
    """Preprocessing chain applied to every acquired frame."""

    def __init__(self, isam: bool = False, suppress_negative: bool = False,
                 guard_rows: int = 0, focus_row: int = 0, isam_config: Optional[IsamConfig] = None):
        self.isam = isam
        self.suppress_negative = suppress_negative
        self.guard_rows = guard_rows
        self.focus_row = focus_row
        self.isam_config = isam_config

    def reconstruct(self, frame: SpectralFrame) -> ComplexImage:
        if self.suppress_negative:
            frame = suppress_negative_delay(frame, self.guard_rows)
        if not self.isam:
            return reconstruct_ifft(frame)
        cfg = self.isam_config or IsamConfig(k_min=frame.k_min, k_max=frame.k_max, focus_row=self.focus_row)
        return isam_resample(frame, cfg)
