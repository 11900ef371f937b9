from app.models.config_models import (
    DenoiseConfig,
    FlowConfig,
    IsamConfig,
    MotionSpec,
    NoiseSpec,
    PhantomSpec,
    PipelineConfig,
)
from app.models.raster_models import (
    ComplexImage,
    DisplacementField,
    FrameStack,
    Image,
    SpectralFrame,
)

__all__ = [
    "ComplexImage",
    "DenoiseConfig",
    "DisplacementField",
    "FlowConfig",
    "FrameStack",
    "Image",
    "IsamConfig",
    "MotionSpec",
    "NoiseSpec",
    "PhantomSpec",
    "PipelineConfig",
    "SpectralFrame",
]
