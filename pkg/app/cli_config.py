"""Plain-text run configuration: one ``section.key = value`` per line, ``#`` comments."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError

from app.errors import ConfigError, RasterIOError, UsageError
from app.models.config_models import (
    DenoiseConfig,
    FlowConfig,
    MotionSpec,
    NoiseSpec,
    PhantomSpec,
    PipelineConfig,
)

logger = logging.getLogger(__name__)

SPECTRA_KEYS = {"n_k", "fractional_bandwidth"}

SECTIONS = {
    "phantom": PhantomSpec,
    "motion": MotionSpec,
    "noise": NoiseSpec,
    "flow": FlowConfig,
    "denoise": DenoiseConfig,
    "pipeline": PipelineConfig,
}


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    motion: MotionSpec = field(default_factory=MotionSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    n_k: int = 0  # 0: twice the phantom depth
    fractional_bandwidth: float = 0.1


def parse_config_text(text: str, source: str = "<config>",
                      allowed=("spectra", *SECTIONS)) -> Dict[str, Dict[str, str]]:
    sections: Dict[str, Dict[str, str]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"{source}:{number}: expected 'section.key = value', got {raw.strip()!r}")
        if section not in allowed:
            raise UsageError(f"{source}:{number}: unknown section {section!r}")
        sections.setdefault(section, {})[name] = value.strip()
    return sections


def _build(model, values: Dict[str, str], section: str):
    unknown = set(values) - set(model.model_fields)
    if unknown:
        raise UsageError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid [{section}] settings: {e}") from e


def build_run_config(sections: Dict[str, Dict[str, str]]) -> RunConfig:
    config = RunConfig()
    for name in ("phantom", "motion", "noise"):
        if name in sections:
            setattr(config, name, _build(SECTIONS[name], sections[name], name))

    pipeline_values: Dict[str, object] = dict(sections.get("pipeline", {}))
    for nested in ("flow", "denoise"):
        if nested in pipeline_values:
            raise UsageError(f"set {nested} options in the [{nested}] section")
        if nested in sections:
            pipeline_values[nested] = _build(SECTIONS[nested], sections[nested], nested)
    config.pipeline = _build(PipelineConfig, pipeline_values, "pipeline")

    spectra = sections.get("spectra", {})
    unknown = set(spectra) - SPECTRA_KEYS
    if unknown:
        raise UsageError(f"unknown key(s) in [spectra]: {', '.join(sorted(unknown))}")
    try:
        config.n_k = int(spectra.get("n_k", config.n_k))
        config.fractional_bandwidth = float(spectra.get("fractional_bandwidth", config.fractional_bandwidth))
    except ValueError as e:
        raise ConfigError(f"invalid [spectra] settings: {e}") from e
    return config


def load_run_config(path: Optional[str]) -> RunConfig:
    """Defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise RasterIOError(path, e) from e
    logger.debug(f"Loaded config {path}")
    return build_run_config(parse_config_text(text, str(path)))


# ==================== SPECTRAL GEOMETRY SIDECAR ====================

GEOMETRY_KEYS = ("k_min", "k_max", "pixel_pitch_lateral")


def write_geometry(path, k_min: float, k_max: float, pixel_pitch_lateral: float) -> None:
    lines = [
        "# wavenumber sampling of the spectra raster (rad/um)",
        f"geometry.k_min = {k_min!r}",
        f"geometry.k_max = {k_max!r}",
        f"geometry.pixel_pitch_lateral = {pixel_pitch_lateral!r}",
    ]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise RasterIOError(path, e) from e


def read_geometry(path) -> Dict[str, float]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise RasterIOError(path, e) from e
    values = parse_config_text(text, str(path), allowed=("geometry",)).get("geometry", {})
    missing = [key for key in GEOMETRY_KEYS if key not in values]
    if missing:
        raise ConfigError(f"{path}: missing geometry key(s) {', '.join(missing)}")
    try:
        return {key: float(values[key]) for key in GEOMETRY_KEYS}
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
