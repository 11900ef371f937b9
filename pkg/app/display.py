"""Log-magnitude display convention: every stage after reconstruction works on these images."""
from typing import Optional, Sequence, List

import numpy as np

from app.errors import ConfigError, MetricError
from app.models.raster_models import ComplexImage, Image


def log_compress(img: ComplexImage, floor_db: float = -60.0,
                 reference_max: Optional[float] = None) -> Image:
    """Map |z| to max(20 log10(|z| / max|z|), floor_db) rescaled onto [0, 1]."""
    if floor_db >= 0:
        raise ConfigError(f"floor_db must be negative, got {floor_db}")
    magnitude = np.abs(img.data)
    peak = float(magnitude.max()) if reference_max is None else float(reference_max)
    if peak <= 0:
        raise MetricError("cannot log-compress an all-zero image")
    with np.errstate(divide="ignore"):
        decibels = 20.0 * np.log10(magnitude / peak)
    decibels = np.clip(decibels, floor_db, 0.0)
    scaled = (decibels - floor_db) / (-floor_db)
    return Image(scaled, img.pixel_pitch_axial, img.pixel_pitch_lateral)


def log_compress_stack(images: Sequence[ComplexImage], floor_db: float = -60.0) -> List[Image]:
    """Compress a sequence with one shared normalization so relative brightness survives."""
    peak = max(float(np.abs(img.data).max()) for img in images)
    return [log_compress(img, floor_db, reference_max=peak) for img in images]
