"""Command line entry point: simulate, reconstruct, flow, denoise, pipeline, metrics.

Exit codes: 0 success, 1 usage error, 2 data error.

Only ``simulate`` draws random numbers and takes ``--seed``; every other command
is deterministic for a given input and config, whatever OCE_WORKERS is.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables before settings are read
load_dotenv()

from prometheus_client import REGISTRY, write_to_textfile  # noqa: E402

from app.cli_config import load_run_config, read_geometry, write_geometry  # noqa: E402
from app.config import settings  # noqa: E402
from app.display import log_compress, log_compress_stack  # noqa: E402
from app.errors import ConfigError, OceError, RasterIOError, ShapeMismatchError, UsageError  # noqa: E402
from app.models.config_models import DenoiseConfig  # noqa: E402
from app.models.raster_models import ComplexImage, FrameStack, Image, SpectralFrame  # noqa: E402
from app.raster_io import read_fields, read_raster, write_fields, write_pgm, write_raster  # noqa: E402
from app.services.denoise_service import denoise_stack  # noqa: E402
from app.services.flow_service import estimate_flow  # noqa: E402
from app.services.metrics_service import (  # noqa: E402
    MetricRow,
    format_metrics_csv,
    metric_ncc,
    metric_rmse_field,
    metric_rmse_image,
    write_metrics_csv,
)
from app.services.phantom_service import PhantomService  # noqa: E402
from app.services.pipeline_service import GroundTruth, run_pipeline  # noqa: E402
from app.services.recon_service import ReconService  # noqa: E402

logger = logging.getLogger(__name__)

TRUTH_FIELDS = "fields_truth"
CLEAN_FRAMES = "clean_complex.ocer"


class CliParser(argparse.ArgumentParser):
    """argparse that reports bad usage as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# ==================== HELPERS ====================

def _output_dir(path: Optional[str]) -> Path:
    directory = Path(path or settings.DATA_DIR)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RasterIOError(directory, e) from e
    return directory


def _as_image(array: np.ndarray, floor_db: float) -> Image:
    if array.ndim != 2:
        raise ShapeMismatchError(f"expected a 2D raster, got shape {array.shape}")
    if np.iscomplexobj(array):
        return log_compress(ComplexImage(array), floor_db)
    return Image(array)


def _as_images(arrays: List[np.ndarray], floor_db: float) -> List[Image]:
    """Complex inputs are compressed together so they share one normalization, as in the pipeline."""
    for array in arrays:
        if array.ndim != 2:
            raise ShapeMismatchError(f"expected a 2D raster, got shape {array.shape}")
    if all(np.iscomplexobj(array) for array in arrays):
        return log_compress_stack([ComplexImage(array) for array in arrays], floor_db)
    return [_as_image(array, floor_db) for array in arrays]


def _load_frames(path: str, geometry: Optional[str]) -> list:
    data = read_raster(path)
    if data.ndim != 3:
        raise ShapeMismatchError(f"{path}: expected a (frames, rows, cols) stack, got {data.shape}")
    if geometry:
        spec = read_geometry(geometry)
        return [SpectralFrame(plane, spec["k_min"], spec["k_max"], spec["pixel_pitch_lateral"]) for plane in data]
    if np.iscomplexobj(data):
        return [ComplexImage(plane) for plane in data]
    return [Image(plane) for plane in data]


# ==================== SUBCOMMANDS ====================

def cmd_simulate(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config.phantom = config.phantom.model_copy(update={"seed": args.seed})
        config.motion = config.motion.model_copy(update={"seed": args.seed})
        config.noise = config.noise.model_copy(update={"seed": args.seed + 1})
    out = _output_dir(args.output_dir)

    service = PhantomService(config.phantom, config.motion, config.noise)
    sequence = service.sequence()
    spectra = service.spectra(sequence, config.n_k, config.fractional_bandwidth)

    write_raster(sequence.frames.as_array(), out / "frames_complex.ocer")
    write_raster(sequence.clean.as_array(), out / CLEAN_FRAMES)
    write_raster(np.stack([frame.data for frame in spectra]), out / "spectra.ocer")
    write_geometry(out / "geometry.cfg", spectra[0].k_min, spectra[0].k_max, spectra[0].pixel_pitch_lateral)
    write_fields(sequence.fields, out / TRUTH_FIELDS)
    logger.info(f"Simulated {len(sequence.frames)} frames into {out}")
    print(f"✅ Wrote {len(sequence.frames)} frames, spectra and ground truth to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    frames = _load_frames(args.input, args.geometry)
    if not isinstance(frames[0], SpectralFrame):
        raise UsageError("reconstruct needs --geometry to interpret the input as spectra")
    recon = ReconService(
        isam=args.isam,
        suppress_negative=args.suppress_negative_delay,
        guard_rows=args.guard_rows,
        focus_row=args.focus_row,
    )
    images = [recon.reconstruct(frame) for frame in frames]
    if args.complex:
        write_raster(np.stack([img.data for img in images]), args.output)
    else:
        write_raster(np.stack([img.data for img in log_compress_stack(images, args.floor_db)]), args.output)
    print(f"✅ Reconstructed {len(images)} frames ({'ISAM' if args.isam else 'IFFT'}) to {args.output}")
    return 0


def cmd_flow(args) -> int:
    config = load_run_config(args.config)
    ref, mov = _as_images([read_raster(args.ref), read_raster(args.mov)], config.pipeline.floor_db)
    field = estimate_flow(ref, mov, config.pipeline.flow)
    write_fields(field, args.output)
    if args.preview:
        write_pgm(np.hypot(field.u_axial, field.u_lateral), f"{args.output}_preview.pgm")
    print(f"✅ Flow written to {args.output}_*.ocer ({int(field.valid.sum())}/{field.valid.size} valid pixels)")
    return 0


def cmd_denoise(args) -> int:
    frames = _load_frames(args.input, None)
    if isinstance(frames[0], ComplexImage):
        frames = log_compress_stack(frames, settings.FLOOR_DB)
    stack = FrameStack(tuple(frames))
    sigma = args.sigma if args.sigma == "auto" else float(args.sigma)
    try:
        cfg = DenoiseConfig(
            block=args.block,
            search_window=args.search,
            max_group=args.group,
            step=min(args.step, args.block),
            sigma=sigma,
            wiener_stage=not args.no_wiener,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid denoise options: {e}") from e
    mask = read_raster(args.mask).astype(bool) if args.mask else None
    result = denoise_stack(stack, mask, cfg)
    write_raster(result.as_array(), args.output)
    print(f"✅ Denoised {len(result)} frames to {args.output}")
    return 0


def cmd_pipeline(args) -> int:
    config = load_run_config(args.config)
    frames = _load_frames(args.input, args.geometry)
    truth = None
    if args.truth_dir:
        truth_dir = Path(args.truth_dir)
        clean = [ComplexImage(plane) for plane in read_raster(truth_dir / CLEAN_FRAMES)]
        truth = GroundTruth(clean, read_fields(truth_dir / TRUTH_FIELDS))

    report = run_pipeline(frames, config.pipeline, truth)

    out = _output_dir(args.output_dir)
    write_raster(report.denoised.as_array(), out / "denoised.ocer")
    write_raster(report.compensated.as_array(), out / "compensated.ocer")
    write_fields(report.initial_fields, out / "fields_initial")
    write_fields(report.final_fields, out / "fields_final")
    write_pgm(report.denoised[config.pipeline.reference_index], out / "denoised_reference.pgm")
    csv_path = args.csv or out / "metrics.csv"
    write_metrics_csv(report.metrics, csv_path)
    if args.metrics_textfile:
        write_to_textfile(args.metrics_textfile, REGISTRY)

    for stage, seconds in report.runtimes.items():
        logger.info(f"Stage {stage}: {seconds:.2f}s")
    print(f"✅ Pipeline finished: {len(report.metrics)} metrics in {csv_path}")
    return 0


def cmd_metrics(args) -> int:
    if args.kind == "field-rmse":
        lateral, axial = metric_rmse_field(read_fields(args.est), read_fields(args.truth))
        rows = [MetricRow("field_rmse_lateral", lateral, "all"), MetricRow("field_rmse_axial", axial, "all")]
    else:
        est = _as_image(read_raster(args.est), settings.FLOOR_DB)
        truth = _as_image(read_raster(args.truth), settings.FLOOR_DB)
        if args.kind == "image-rmse":
            rows = [MetricRow("image_rmse", metric_rmse_image(est, truth))]
        else:
            rows = [MetricRow("image_ncc", metric_ncc(est, truth))]
    print("\n".join(format_metrics_csv(rows)))
    return 0


# ==================== PARSER ====================

def build_parser() -> CliParser:
    parser = CliParser(prog="oce", description="Motion-compensated OCT denoising and displacement estimation")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("simulate", help="render a phantom sequence with ground truth")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="overrides the phantom, motion and noise seeds")
    p.add_argument("--output-dir")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("reconstruct", help="spectra to images (IFFT or ISAM)")
    p.add_argument("--input", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--isam", dest="isam", action="store_true")
    p.add_argument("--no-isam", dest="isam", action="store_false")
    p.add_argument("--suppress-negative-delay", action="store_true")
    p.add_argument("--guard-rows", type=int, default=0)
    p.add_argument("--focus-row", type=int, default=0)
    p.add_argument("--floor-db", type=float, default=settings.FLOOR_DB)
    p.add_argument("--complex", action="store_true", help="write complex images instead of log magnitude")
    p.set_defaults(handler=cmd_reconstruct, isam=False)

    p = sub.add_parser("flow", help="dense displacement between two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--mov", required=True)
    p.add_argument("--config")
    p.add_argument("--output", required=True, help="output prefix")
    p.add_argument("--preview", action="store_true")
    p.set_defaults(handler=cmd_flow)

    p = sub.add_parser("denoise", help="collaborative denoising of a frame stack")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma", default="auto")
    p.add_argument("--no-wiener", action="store_true")
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--group", type=int, default=16)
    p.add_argument("--search", type=int, default=24)
    p.add_argument("--step", type=int, default=4)
    p.add_argument("--mask", help="out-of-view mask stack (u8)")
    p.set_defaults(handler=cmd_denoise)

    p = sub.add_parser("pipeline", help="full estimation and denoising loop")
    p.add_argument("--input", required=True)
    p.add_argument("--geometry", help="treat the input as spectra with this geometry sidecar")
    p.add_argument("--config")
    p.add_argument("--truth-dir")
    p.add_argument("--output-dir")
    p.add_argument("--csv")
    p.add_argument("--metrics-textfile")
    p.set_defaults(handler=cmd_pipeline)

    p = sub.add_parser("metrics", help="compare an estimate with ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--kind", required=True, choices=["image-rmse", "ncc", "field-rmse"])
    p.set_defaults(handler=cmd_metrics)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "denoise" and args.sigma != "auto":
            try:
                float(args.sigma)
            except ValueError:
                raise UsageError(f"--sigma must be 'auto' or a number, got {args.sigma!r}")
        return args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except OceError as e:
        logger.error(e.detail)
        print(f"❌ {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        logger.error(f"Invalid data: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
