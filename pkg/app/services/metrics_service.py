"""Evaluation against phantom ground truth: image RMSE, NCC and displacement RMSE."""
import csv
import logging
import math
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import MetricError, RasterIOError, ShapeMismatchError
from app.models.raster_models import DisplacementField, Image

logger = logging.getLogger(__name__)

CSV_HEADER = ("metric", "value", "frame_pair")

Fields = Union[DisplacementField, Sequence[DisplacementField]]


class MetricRow(NamedTuple):
    metric: str
    value: float
    frame_pair: str = ""


def interior_mask(shape: Tuple[int, int], border: int) -> np.ndarray:
    """True everywhere except a ``border``-pixel frame on every side."""
    mask = np.zeros(shape, dtype=bool)
    rows, cols = shape
    if 2 * border < rows and 2 * border < cols:
        mask[border:rows - border, border:cols - border] = True
    return mask


def _selection(shape, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} does not match {shape}")
    if not mask.any():
        raise MetricError("metric mask selects no pixels")
    return mask


def metric_rmse_image(est: Image, truth: Image, mask: Optional[np.ndarray] = None) -> float:
    if est.shape != truth.shape:
        raise ShapeMismatchError(f"estimate {est.shape} and truth {truth.shape} differ")
    selected = _selection(est.shape, mask)
    diff = est.data[selected] - truth.data[selected]
    return math.sqrt(float(np.mean(diff ** 2)))


def metric_ncc(est: Image, truth: Image, mask: Optional[np.ndarray] = None) -> float:
    """Zero-mean normalized correlation coefficient."""
    if est.shape != truth.shape:
        raise ShapeMismatchError(f"estimate {est.shape} and truth {truth.shape} differ")
    selected = _selection(est.shape, mask)
    a = est.data[selected] - est.data[selected].mean()
    b = truth.data[selected] - truth.data[selected].mean()
    norm = math.sqrt(float((a ** 2).sum()) * float((b ** 2).sum()))
    if norm == 0:
        raise MetricError("NCC is undefined for a constant image")
    return float((a * b).sum()) / norm


def metric_rmse_field(est: Fields, truth: Fields, mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(lateral, axial) RMSE over jointly valid pixels, pooled when given lists of fields."""
    if isinstance(est, DisplacementField):
        est, truth = [est], [truth]
    if len(est) != len(truth):
        raise ShapeMismatchError(f"{len(est)} estimated fields vs {len(truth)} ground-truth fields")
    sum_lateral = sum_axial = 0.0
    count = 0
    for e, t in zip(est, truth):
        if e.shape != t.shape:
            raise ShapeMismatchError(f"field shapes {e.shape} and {t.shape} differ")
        selected = e.valid & t.valid
        if mask is not None:
            selected &= _selection(e.shape, mask)
        sum_lateral += float(((e.u_lateral - t.u_lateral)[selected] ** 2).sum())
        sum_axial += float(((e.u_axial - t.u_axial)[selected] ** 2).sum())
        count += int(selected.sum())
    if count == 0:
        raise MetricError("no jointly valid pixels to compare")
    return math.sqrt(sum_lateral / count), math.sqrt(sum_axial / count)


def field_gradient(fields: Fields, mask: Optional[np.ndarray] = None) -> float:
    """Mean magnitude of the spatial displacement gradient; lower means smoother."""
    if isinstance(fields, DisplacementField):
        fields = [fields]
    totals = []
    for field in fields:
        selected = _selection(field.shape, mask)
        squared = sum(g ** 2 for plane in (field.u_axial, field.u_lateral) for g in np.gradient(plane))
        totals.append(np.sqrt(squared)[selected])
    return float(np.mean(np.concatenate(totals)))


def write_metrics_csv(rows: Iterable[MetricRow], path) -> None:
    """metric,value,frame_pair with round-trippable float formatting."""
    try:
        with open(Path(path), "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in rows:
                writer.writerow((row.metric, f"{row.value:.17g}", row.frame_pair))
    except OSError as e:
        raise RasterIOError(path, e) from e


def format_metrics_csv(rows: Iterable[MetricRow]) -> List[str]:
    lines = [",".join(CSV_HEADER)]
    lines.extend(f"{row.metric},{row.value:.17g},{row.frame_pair}" for row in rows)
    return lines
