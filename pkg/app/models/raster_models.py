"""Raster and field containers shared by all processing stages.

Axis order is fixed everywhere: axis 0 is axial/depth (z), axis 1 is lateral (x).
Containers are frozen; operations return new instances.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import NonFiniteError, ShapeMismatchError


def _check_raster(data: np.ndarray, name: str) -> None:
    if data.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2D, got shape {data.shape}")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} contains NaN or Inf")


@dataclass(frozen=True)
class Image:
    """Real-valued B-scan raster (depth x lateral)."""
    data: np.ndarray
    pixel_pitch_axial: float = 1.0
    pixel_pitch_lateral: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_raster(data, "Image")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.pixel_pitch_axial, self.pixel_pitch_lateral)


@dataclass(frozen=True)
class ComplexImage:
    """Complex raster, only produced and consumed inside reconstruction."""
    data: np.ndarray
    pixel_pitch_axial: float = 1.0
    pixel_pitch_lateral: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        _check_raster(data, "ComplexImage")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "ComplexImage":
        return ComplexImage(data, self.pixel_pitch_axial, self.pixel_pitch_lateral)


@dataclass(frozen=True)
class SpectralFrame:
    """Interferogram samples over (wavenumber, lateral position).

    Wavenumbers are uniformly spaced, k_j = k_min + j * dk with
    dk = (k_max - k_min) / (n_k - 1).
    """
    data: np.ndarray
    k_min: float
    k_max: float
    pixel_pitch_lateral: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if np.iscomplexobj(data):
            data = data.astype(np.complex128)
        else:
            data = data.astype(np.float64)
        _check_raster(data, "SpectralFrame")
        if not self.k_min < self.k_max:
            raise ShapeMismatchError(f"k_min ({self.k_min}) must be below k_max ({self.k_max})")
        object.__setattr__(self, "data", data)

    @property
    def n_k(self) -> int:
        return self.data.shape[0]

    @property
    def n_x(self) -> int:
        return self.data.shape[1]

    @property
    def dk(self) -> float:
        return (self.k_max - self.k_min) / max(self.n_k - 1, 1)

    @property
    def wavenumbers(self) -> np.ndarray:
        return self.k_min + self.dk * np.arange(self.n_k)

    @property
    def axial_pitch(self) -> float:
        """Depth per reconstructed row (µm), conjugate to the k sampling."""
        return np.pi / (self.n_k * self.dk)

    def with_data(self, data: np.ndarray) -> "SpectralFrame":
        return SpectralFrame(data, self.k_min, self.k_max, self.pixel_pitch_lateral)


@dataclass(frozen=True)
class DisplacementField:
    """Dense per-pixel displacement in pixels.

    Convention: ref(p) ~= mov(p + d(p)). Invalid sites carry zero displacement.
    """
    u_axial: np.ndarray
    u_lateral: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        u_axial = np.asarray(self.u_axial, dtype=np.float64)
        u_lateral = np.asarray(self.u_lateral, dtype=np.float64)
        if u_axial.shape != u_lateral.shape or u_axial.ndim != 2:
            raise ShapeMismatchError(
                f"displacement planes disagree: {u_axial.shape} vs {u_lateral.shape}"
            )
        if self.valid is None:
            valid = np.ones(u_axial.shape, dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != u_axial.shape:
                raise ShapeMismatchError(f"validity mask shape {valid.shape} != {u_axial.shape}")
        if not (np.all(np.isfinite(u_axial)) and np.all(np.isfinite(u_lateral))):
            raise NonFiniteError("displacement field contains NaN or Inf")
        u_axial = np.where(valid, u_axial, 0.0)
        u_lateral = np.where(valid, u_lateral, 0.0)
        object.__setattr__(self, "u_axial", u_axial)
        object.__setattr__(self, "u_lateral", u_lateral)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DisplacementField":
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols)))

    @classmethod
    def constant(cls, rows: int, cols: int, axial: float, lateral: float) -> "DisplacementField":
        return cls(np.full((rows, cols), float(axial)), np.full((rows, cols), float(lateral)))

    @property
    def rows(self) -> int:
        return self.u_axial.shape[0]

    @property
    def cols(self) -> int:
        return self.u_axial.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u_axial.shape


RasterLike = Union[Image, ComplexImage]


@dataclass(frozen=True)
class FrameStack:
    """Temporal sequence of co-registered rasters with shared geometry."""
    frames: Tuple[RasterLike, ...]
    timestamps: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ShapeMismatchError(f"a frame stack needs at least 2 frames, got {len(frames)}")
        first = frames[0]
        for idx, frame in enumerate(frames[1:], start=1):
            if type(frame) is not type(first):
                raise ShapeMismatchError(f"frame {idx} has type {type(frame).__name__}")
            if (frame.shape != first.shape
                    or frame.pixel_pitch_axial != first.pixel_pitch_axial
                    or frame.pixel_pitch_lateral != first.pixel_pitch_lateral):
                raise ShapeMismatchError(f"frame {idx} geometry differs from frame 0")
        if self.timestamps is not None and len(self.timestamps) != len(frames):
            raise ShapeMismatchError("timestamps must match the number of frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, idx: int) -> RasterLike:
        return self.frames[idx]

    def __iter__(self):
        return iter(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].shape

    def as_array(self) -> np.ndarray:
        """Frames stacked as (T, rows, cols)."""
        return np.stack([frame.data for frame in self.frames])

    @classmethod
    def from_array(cls, data: np.ndarray, pixel_pitch_axial: float = 1.0,
                   pixel_pitch_lateral: float = 1.0) -> "FrameStack":
        container = ComplexImage if np.iscomplexobj(data) else Image
        return cls(tuple(container(plane, pixel_pitch_axial, pixel_pitch_lateral) for plane in data))

    def with_frames(self, frames: Sequence[RasterLike]) -> "FrameStack":
        return FrameStack(tuple(frames), self.timestamps)
