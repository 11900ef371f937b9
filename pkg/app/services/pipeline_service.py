"""Simultaneous displacement estimation and motion-compensated denoising.

Loop: preprocess, pairwise flow, compose to the reference frame, warp the ORIGINAL
preprocessed frames, denoise the warped stack, unwarp with the adjoint, re-estimate
pairwise flow on the unwarped frames; repeat from the warp ``iterations`` times.
"""
import logging
import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from prometheus_client import Histogram

from app.config import settings
from app.display import log_compress, log_compress_stack
from app.errors import ConfigError, MetricError, OceError, ShapeMismatchError, StageError
from app.models.config_models import PipelineConfig
from app.models.raster_models import ComplexImage, DisplacementField, FrameStack, Image, SpectralFrame
from app.services.denoise_service import denoise_stack
from app.services.flow_service import FlowService
from app.services.metrics_service import (
    MetricRow,
    field_gradient,
    interior_mask,
    metric_ncc,
    metric_rmse_field,
    metric_rmse_image,
)
from app.services.recon_service import ReconService
from app.services.warp_service import WarpOperator, apply, apply_adjoint, compose_to_reference

logger = logging.getLogger(__name__)

STAGE_SECONDS = Histogram(
    "oce_pipeline_stage_seconds",
    "Wall time spent in each pipeline stage",
    ["stage"],
)

WarpHook = Callable[[int, FrameStack], None]


class GroundTruth(NamedTuple):
    """Clean frames (before preprocessing) and pairwise fields, frame i to i + 1."""
    clean: Sequence[Union[Image, ComplexImage]]
    fields: Sequence[DisplacementField]


class Compensation(NamedTuple):
    operators: List[WarpOperator]
    warped: FrameStack
    compensated: FrameStack
    unwarped: FrameStack


@dataclass
class PipelineReport:
    initial_fields: List[DisplacementField]
    iteration_fields: List[List[DisplacementField]]
    denoised: FrameStack
    compensated: FrameStack
    preprocessed: FrameStack
    metrics: List[MetricRow] = field(default_factory=list)
    runtimes: Dict[str, float] = field(default_factory=dict)

    @property
    def final_fields(self) -> List[DisplacementField]:
        return self.iteration_fields[-1]


# ==================== STAGES ====================

def reconstruct_frames(frames: Sequence, cfg: PipelineConfig) -> list:
    """Spectral frames become complex images; images pass through unchanged."""
    frames = list(frames)
    if not frames:
        raise ShapeMismatchError("no frames to process")
    first = frames[0]
    if isinstance(first, SpectralFrame):
        recon = ReconService(
            isam=cfg.preprocess == "isam",
            suppress_negative=cfg.suppress_negative_delay,
            guard_rows=cfg.guard_rows,
            focus_row=cfg.focus_row,
        )
        frames = [recon.reconstruct(frame) for frame in frames]
    return frames


def preprocess(frames: Sequence, cfg: PipelineConfig) -> FrameStack:
    """Bring any accepted input to log-compressed Images sharing one normalization."""
    frames = reconstruct_frames(frames, cfg)
    if isinstance(frames[0], ComplexImage):
        return FrameStack(tuple(log_compress_stack(frames, cfg.floor_db)))
    return FrameStack(tuple(frames))


def frame_average(frames: Sequence[Image]) -> Image:
    """Plain B-scan average with no motion compensation."""
    if not frames:
        raise ShapeMismatchError("no frames to average")
    return frames[0].with_data(np.mean([frame.data for frame in frames], axis=0))


def warped_mean(frames: Sequence[Image], operators: Sequence[WarpOperator]) -> Image:
    """Naive motion-compensated average: mean of every frame warped to the reference."""
    if len(frames) != len(operators):
        raise ShapeMismatchError(f"{len(frames)} frames but {len(operators)} warp operators")
    total = sum(apply(op, frame).data for op, frame in zip(operators, frames))
    return frames[0].with_data(total / len(frames))


def unwarp(op: WarpOperator, denoised: Image, original: Image) -> Image:
    """Adjoint warp normalized by the adjoint of ones; pixels nothing maps to keep the original."""
    back = apply_adjoint(op, denoised).data
    coverage = (op.transpose @ np.ones(op.n_pixels)).reshape(op.shape)
    covered = coverage > 0
    if not covered.all():
        logger.warning(f"{int((~covered).sum())} pixels have no warp coverage; keeping original values")
    values = np.where(covered, back / np.where(covered, coverage, 1.0), original.data)
    return original.with_data(values)


def motion_compensated_denoise(stack: FrameStack, fields: Sequence[DisplacementField],
                               cfg: PipelineConfig, iteration: int = 0,
                               on_warp: Optional[WarpHook] = None) -> Compensation:
    """One warp -> denoise -> unwarp cycle on the original preprocessed ``stack``."""
    operators = compose_to_reference(fields, cfg.reference_index)
    if on_warp is not None:
        on_warp(iteration, stack)
    warped = stack.with_frames([apply(op, frame) for op, frame in zip(operators, stack)])
    mask = np.stack([op.out_of_view for op in operators])
    compensated = denoise_stack(warped, mask, cfg.denoise)
    unwarped = stack.with_frames([
        unwarp(op, frame, original) for op, frame, original in zip(operators, compensated, stack)
    ])
    return Compensation(operators, warped, compensated, unwarped)


# ==================== ORCHESTRATION ====================

class PipelineService:
    """Runs the full loop and collects fields, images, metrics and stage timings."""

    def __init__(self, cfg: Optional[PipelineConfig] = None, on_warp: Optional[WarpHook] = None):
        self.cfg = cfg or PipelineConfig()
        self.on_warp = on_warp
        self.flow = FlowService(self.cfg.flow)
        self.runtimes: Dict[str, float] = defaultdict(float)
        self._peak: Optional[float] = None

    @contextmanager
    def _stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (OceError, ValueError, ArithmeticError) as e:
            logger.error(f"Stage {name} failed: {e}")
            raise StageError(name, e) from e
        finally:
            elapsed = time.perf_counter() - start
            self.runtimes[name] += elapsed
            if settings.ENABLE_METRICS:
                STAGE_SECONDS.labels(stage=name).observe(elapsed)

    def run(self, frames: Sequence, ground_truth: Optional[GroundTruth] = None) -> PipelineReport:
        """
        Estimate, compensate, denoise and re-estimate for ``cfg.iterations`` cycles.

        Args:
            frames: At least two SpectralFrames, ComplexImages or log-compressed Images
            ground_truth: Clean frames and pairwise fields; enables the comparison metrics

        Returns:
            PipelineReport with the initial and per-iteration fields, the denoised and
            compensated stacks, the metric rows and per-stage wall times

        Raises:
            StageError: a stage failed; ``stage`` names it
            ConfigError: reference_index does not address a frame
        """
        cfg = self.cfg
        if len(frames) < 2:
            raise StageError("preprocess", ShapeMismatchError(f"need at least 2 frames, got {len(frames)}"))
        if cfg.reference_index >= len(frames):
            raise ConfigError(f"reference_index {cfg.reference_index} outside [0, {len(frames)})", exit_code=1)

        with self._stage("preprocess"):
            recon = reconstruct_frames(frames, cfg)
            stack = preprocess(recon, cfg)
        self._peak = None
        if isinstance(recon[0], ComplexImage):
            self._peak = max(float(np.abs(frame.data).max()) for frame in recon)
        logger.info(f"Preprocessed {len(stack)} frames of {stack.shape[0]}x{stack.shape[1]}")

        with self._stage("flow"):
            fields = self.flow.pairwise(stack)
        initial = fields

        iteration_fields = []
        compensation = None
        for iteration in range(cfg.iterations):
            with self._stage("denoise"):
                compensation = motion_compensated_denoise(stack, fields, cfg, iteration, self.on_warp)
            with self._stage("flow"):
                fields = self.flow.pairwise(compensation.unwarped)
            iteration_fields.append(fields)
            logger.info(f"Iteration {iteration + 1}/{cfg.iterations} complete")

        report = PipelineReport(
            initial_fields=initial,
            iteration_fields=iteration_fields,
            denoised=compensation.unwarped,
            compensated=compensation.compensated,
            preprocessed=stack,
        )
        with self._stage("metrics"):
            report.metrics = self._metrics(stack, compensation, initial, fields, ground_truth)
        report.runtimes = dict(self.runtimes)
        return report

    def _metrics(self, stack: FrameStack, compensation: Compensation,
                 initial: List[DisplacementField], final: List[DisplacementField],
                 ground_truth: Optional[GroundTruth]) -> List[MetricRow]:
        cfg = self.cfg
        mask = interior_mask(stack.shape, cfg.metrics_border)
        if not mask.any():
            mask = None
        rows = [
            MetricRow("field_gradient_initial", field_gradient(initial, mask), "all"),
            MetricRow("field_gradient_final", field_gradient(final, mask), "all"),
        ]
        if ground_truth is None:
            return rows

        r = cfg.reference_index
        truth = self._truth_image(ground_truth.clean[r])
        pair = str(r)
        candidates = {
            "original": stack[r],
            "frame_average": frame_average(list(stack)),
            "warped_mean": warped_mean(list(stack), compensation.operators),
            "proposed": compensation.unwarped[r],
        }
        for name, image in candidates.items():
            rows.append(MetricRow(f"image_rmse_{name}", metric_rmse_image(image, truth, mask), pair))
        for name, image in candidates.items():
            rows.append(MetricRow(f"image_ncc_{name}", _or_nan(metric_ncc, image, truth, mask), pair))

        for label, estimate in (("initial", initial), ("final", final)):
            lateral, axial = _or_nan(metric_rmse_field, estimate, list(ground_truth.fields), mask, pair=True)
            rows.append(MetricRow(f"field_rmse_lateral_{label}", lateral, "all"))
            rows.append(MetricRow(f"field_rmse_axial_{label}", axial, "all"))
            for index, (e, t) in enumerate(zip(estimate, ground_truth.fields)):
                lateral, axial = _or_nan(metric_rmse_field, e, t, mask, pair=True)
                rows.append(MetricRow(f"field_rmse_lateral_{label}", lateral, f"{index}-{index + 1}"))
                rows.append(MetricRow(f"field_rmse_axial_{label}", axial, f"{index}-{index + 1}"))
        return rows

    def _truth_image(self, clean) -> Image:
        """Clean frame compressed with the same normalization as the processed input."""
        if isinstance(clean, Image):
            return clean
        return log_compress(clean, self.cfg.floor_db, reference_max=self._peak)


def _or_nan(metric, *args, pair: bool = False):
    """Undefined metrics (nothing jointly valid, constant image) are reported as NaN."""
    try:
        return metric(*args)
    except MetricError as e:
        logger.warning(f"{metric.__name__} undefined: {e.detail}; reporting NaN")
        return (math.nan, math.nan) if pair else math.nan


def run_pipeline(frames: Sequence, cfg: Optional[PipelineConfig] = None,
                 ground_truth: Optional[GroundTruth] = None,
                 on_warp: Optional[WarpHook] = None) -> PipelineReport:
    return PipelineService(cfg, on_warp).run(frames, ground_truth)
