"""Validated configuration records for every processing stage."""
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ==================== PHANTOM ====================

class PhantomSpec(_Record):
    """Scatterer scene standing in for a bead-in-gel specimen."""
    rows: int = 128
    cols: int = 128
    n_scatterers: int = 2000
    reflectivity_range: Tuple[float, float] = (0.5, 1.0)
    psf_sigma_axial: float = 1.0
    psf_sigma_lateral: float = 1.5
    focus_row: int = 64
    defocus_rate: float = 0.0  # px^2 of quadratic lateral phase per row from focus
    pixel_pitch_axial: float = 2.0
    pixel_pitch_lateral: float = 2.0
    seed: int = 0

    @field_validator("reflectivity_range", mode="before")
    @classmethod
    def _parse_range(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.n_scatterers < 0:
            raise ValueError("n_scatterers must be non-negative")
        low, high = self.reflectivity_range
        if not 0 < low <= high:
            raise ValueError("reflectivity_range must be positive and ordered")
        if self.psf_sigma_axial <= 0 or self.psf_sigma_lateral <= 0:
            raise ValueError("psf sigmas must be positive")
        if not 0 <= self.focus_row < self.rows:
            raise ValueError(f"focus_row {self.focus_row} outside [0, {self.rows})")
        return self


class MotionSpec(_Record):
    kind: Literal["uniform_lateral", "smooth_compression"] = "uniform_lateral"
    n_frames: int = 5
    step_px: float = 5.0
    compression_peak: float = 2.0
    compression_center: Optional[float] = None  # lateral column, defaults to the middle
    compression_width: float = 32.0
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.compression_width <= 0:
            raise ValueError("compression_width must be positive")
        return self


class NoiseSpec(_Record):
    model: Literal["additive_gaussian_complex"] = "additive_gaussian_complex"
    sigma: float = 0.0
    seed: int = 1

    @field_validator("sigma")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("sigma must be non-negative")
        return value


# ==================== RECON ====================

class IsamConfig(_Record):
    k_min: float
    k_max: float
    nufft_oversampling: float = 2.0
    kernel_width: int = 8
    kernel_beta: Optional[float] = None  # derived from width/oversampling when omitted
    focus_row: int = 0

    @model_validator(mode="after")
    def _check(self):
        if not self.k_min < self.k_max:
            raise ValueError("k_min must be below k_max")
        if self.nufft_oversampling < 1.25:
            raise ValueError("nufft_oversampling must be at least 1.25")
        if self.kernel_width < 4 or self.kernel_width % 2:
            raise ValueError("kernel_width must be even and at least 4")
        if self.focus_row < 0:
            raise ValueError("focus_row must be non-negative")
        return self


# ==================== FLOW ====================

class FlowConfig(_Record):
    pass_windows: List[Tuple[int, int]] = [(64, 32), (32, 16), (16, 8)]
    search_margin: List[int] = [12, 4, 3]
    peak_fit: Literal["gauss2d", "gauss1x1d", "parabolic"] = "gauss2d"
    min_ncc: float = 0.3
    peak_prominence: float = 4.5  # robust deviations above the surface median; 0 disables
    outlier_median_radius: int = 1
    outlier_tol: float = 1.5

    @field_validator("pass_windows", mode="before")
    @classmethod
    def _parse_windows(cls, value):
        value = _split_list(value)
        parsed = []
        for item in value:
            if isinstance(item, str):
                window, _, overlap = item.partition(":")
                item = (int(window), int(overlap or 0))
            parsed.append(tuple(item))
        return parsed

    @field_validator("search_margin", mode="before")
    @classmethod
    def _parse_margins(cls, value):
        if isinstance(value, int):
            return [value]
        return _split_list(value)

    @model_validator(mode="after")
    def _check(self):
        if not self.pass_windows:
            raise ValueError("at least one pass is required")
        windows = [window for window, _ in self.pass_windows]
        if any(a <= b for a, b in zip(windows, windows[1:])):
            raise ValueError(f"pass windows must be strictly decreasing, got {windows}")
        for window, overlap in self.pass_windows:
            if window < 8:
                raise ValueError(f"window {window} below the minimum of 8")
            if not 0 <= overlap < window:
                raise ValueError(f"overlap {overlap} must be in [0, {window})")
        if len(self.search_margin) not in (1, len(self.pass_windows)):
            raise ValueError("search_margin needs one value or one per pass")
        if any(margin < 1 for margin in self.search_margin):
            raise ValueError("search_margin must be at least 1")
        if not 0 < self.min_ncc < 1:
            raise ValueError("min_ncc must lie in (0, 1)")
        if self.peak_prominence < 0:
            raise ValueError("peak_prominence must be non-negative")
        if self.outlier_median_radius < 1 or self.outlier_tol <= 0:
            raise ValueError("outlier radius must be >= 1 and tolerance positive")
        return self

    def margin_for(self, pass_index: int) -> int:
        if len(self.search_margin) == 1:
            return self.search_margin[0]
        return self.search_margin[pass_index]


# ==================== DENOISE ====================

class DenoiseConfig(_Record):
    block: int = 8
    use_full_temporal: bool = True
    search_window: int = 24
    max_group: int = 16
    step: int = 4
    hard_lambda: float = 2.7
    sigma: Union[Literal["auto"], float] = "auto"
    wiener_stage: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.block < 1 or self.block & (self.block - 1):
            raise ValueError("block must be a power of two")
        if not 1 <= self.step <= self.block:
            raise ValueError("step must be in [1, block]")
        if self.max_group < 1:
            raise ValueError("max_group must be at least 1")
        if self.search_window < self.block:
            raise ValueError("search_window must cover at least one block")
        if not self.use_full_temporal:
            raise ValueError("only full temporal blocks are supported")
        if self.sigma != "auto" and self.sigma < 0:
            raise ValueError("sigma must be non-negative or 'auto'")
        return self


# ==================== PIPELINE ====================

class PipelineConfig(_Record):
    preprocess: Literal["ifft", "isam"] = "ifft"
    suppress_negative_delay: bool = False
    guard_rows: int = 0
    focus_row: int = 0
    floor_db: float = -60.0
    flow: FlowConfig = FlowConfig()
    denoise: DenoiseConfig = DenoiseConfig()
    iterations: int = 1
    reference_index: int = 0
    metrics_border: int = 16

    @model_validator(mode="after")
    def _check(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.reference_index < 0:
            raise ValueError("reference_index must be non-negative")
        if self.floor_db >= 0:
            raise ValueError("floor_db must be negative")
        if self.metrics_border < 0:
            raise ValueError("metrics_border must be non-negative")
        return self
