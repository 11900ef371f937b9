"""Synthetic bead-in-gel phantoms with analytic motion, the oracle for every stage."""
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np
from scipy.special import erf

from app.errors import ConfigError, ShapeMismatchError
from app.models.config_models import MotionSpec, NoiseSpec, PhantomSpec
from app.models.raster_models import ComplexImage, DisplacementField, FrameStack, SpectralFrame

logger = logging.getLogger(__name__)

PATCH_SIGMAS = 5.0
DEFAULT_WAVELENGTH = 0.8  # µm, used when the phantom has no defocus to match


@dataclass(frozen=True)
class Scene:
    """Point scatterers; positions in fractional pixels, phase in radians."""
    row: np.ndarray
    col: np.ndarray
    reflectivity: np.ndarray
    phase: np.ndarray

    def __len__(self) -> int:
        return self.row.size

    def moved(self, row: np.ndarray, col: np.ndarray) -> "Scene":
        return Scene(row, col, self.reflectivity, self.phase)


class SpectralGeometry(NamedTuple):
    n_k: int
    k_min: float
    k_max: float


class PhantomSequence(NamedTuple):
    frames: FrameStack
    fields: List[DisplacementField]
    clean: FrameStack


# ==================== SCENE ====================

def make_scene(spec: PhantomSpec, margin: float = 0.0) -> Scene:
    """Uniformly scattered beads over the raster.

    ``margin`` widens the drawing area on every side, keeping the density, so that
    material can enter the view once the sample moves.
    """
    rng = np.random.default_rng(spec.seed)
    if margin > 0:
        area = (spec.rows + 2 * margin) * (spec.cols + 2 * margin)
        count = int(round(spec.n_scatterers * area / (spec.rows * spec.cols)))
    else:
        count = spec.n_scatterers
    row = rng.uniform(-margin, spec.rows + margin, count)
    col = rng.uniform(-margin, spec.cols + margin, count)
    low, high = spec.reflectivity_range
    reflectivity = rng.uniform(low, high, count)
    phase = rng.uniform(0.0, 2 * np.pi, count)
    return Scene(row, col, reflectivity, phase)


def render_complex(scene: Scene, spec: PhantomSpec) -> ComplexImage:
    """Coherent sum of one point-spread function per scatterer.

    Axially a Gaussian envelope on a mid-band carrier. Laterally a Gaussian beam
    whose complex width s^2 = sigma^2 - 2ib grows with the distance to focus
    (b = defocus_rate * (row - focus_row)); its magnitude widens to
    sqrt(sigma^2 + 4b^2/sigma^2) while the energy stays constant.
    """
    image = np.zeros((spec.rows, spec.cols), dtype=np.complex128)
    sigma_z = spec.psf_sigma_axial
    sigma_x = spec.psf_sigma_lateral
    half_z = int(math.ceil(PATCH_SIGMAS * sigma_z)) + 1

    for row, col, amplitude, phase in zip(scene.row, scene.col, scene.reflectivity, scene.phase):
        b = spec.defocus_rate * (row - spec.focus_row)
        sigma_eff = math.sqrt(sigma_x ** 2 + 4 * b ** 2 / sigma_x ** 2)
        half_x = int(math.ceil(PATCH_SIGMAS * sigma_eff)) + 1

        r0, r1 = max(int(math.floor(row)) - half_z, 0), min(int(math.floor(row)) + half_z + 2, spec.rows)
        c0, c1 = max(int(math.floor(col)) - half_x, 0), min(int(math.floor(col)) + half_x + 2, spec.cols)
        if r0 >= r1 or c0 >= c1:
            continue

        dz = np.arange(r0, r1) - row
        dx = np.arange(c0, c1) - col
        axial = np.exp(-dz ** 2 / (2 * sigma_z ** 2)) * np.exp(1j * np.pi * dz)
        width = sigma_x ** 2 - 2j * b
        lateral = np.sqrt(sigma_x ** 2 / width) * np.exp(-dx ** 2 / (2 * width))
        image[r0:r1, c0:c1] += amplitude * np.exp(1j * phase) * np.outer(axial, lateral)

    return ComplexImage(image, spec.pixel_pitch_axial, spec.pixel_pitch_lateral)


# ==================== SPECTRA ====================

def spectral_geometry(spec: PhantomSpec, n_k: int, fractional_bandwidth: float = 0.1) -> SpectralGeometry:
    """Wavenumber band whose physical defocus equals the phantom's defocus_rate.

    Solves defocus_rate = dz / (4 k_c p_x^2) with dz = pi / (n_k dk) and
    dk = fractional_bandwidth * k_c / (n_k - 1).
    """
    if n_k < 4:
        raise ShapeMismatchError(f"n_k must be at least 4, got {n_k}")
    if not 0 < fractional_bandwidth < 1:
        raise ConfigError(f"fractional_bandwidth must lie in (0, 1), got {fractional_bandwidth}")
    if spec.defocus_rate > 0:
        k_center = math.sqrt(
            math.pi * (n_k - 1)
            / (4 * n_k * fractional_bandwidth * spec.pixel_pitch_lateral ** 2 * spec.defocus_rate)
        )
    else:
        k_center = 2 * math.pi / DEFAULT_WAVELENGTH
    return SpectralGeometry(
        n_k,
        k_center * (1 - fractional_bandwidth / 2),
        k_center * (1 + fractional_bandwidth / 2),
    )


def synthesize_spectrum(img: ComplexImage, geometry: SpectralGeometry) -> SpectralFrame:
    """Forward model of reconstruct_ifft: DFT of each depth profile zero-padded to n_k."""
    if geometry.n_k < img.rows:
        raise ShapeMismatchError(f"n_k ({geometry.n_k}) is smaller than the image depth ({img.rows})")
    spectrum = np.fft.fft(img.data, n=geometry.n_k, axis=0)
    return SpectralFrame(spectrum, geometry.k_min, geometry.k_max, img.pixel_pitch_lateral)


# ==================== MOTION ====================

def motion_at(motion: MotionSpec, rows: int, cols: int,
              z: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame material displacement (axial, lateral) at arbitrary positions."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if motion.kind == "uniform_lateral":
        return np.zeros_like(z + x), np.full_like(z + x, motion.step_px)

    depth = max(rows - 1, 1)
    center = cols / 2 if motion.compression_center is None else motion.compression_center
    width = motion.compression_width
    scale = _compression_scale(motion, rows, cols)

    # Raised-cosine loading in depth times a Gaussian footprint; the lateral term
    # is the antiderivative that makes the field divergence free.
    angle = np.pi * z / depth
    u_axial = scale * 0.5 * (1 + np.cos(angle)) * np.exp(-(x - center) ** 2 / (2 * width ** 2))
    u_lateral = (
        scale * (np.pi / (2 * depth)) * np.sin(angle)
        * width * math.sqrt(np.pi / 2) * erf((x - center) / (math.sqrt(2) * width))
    )
    return u_axial, u_lateral


def _compression_scale(motion: MotionSpec, rows: int, cols: int) -> float:
    if motion.compression_peak == 0:
        return 0.0
    depth = max(rows - 1, 1)
    center = cols / 2 if motion.compression_center is None else motion.compression_center
    z = np.arange(rows)[:, None]
    x = np.arange(cols)[None, :]
    raw = 0.5 * (1 + np.cos(np.pi * z / depth)) * np.exp(-(x - center) ** 2 / (2 * motion.compression_width ** 2))
    return motion.compression_peak / float(np.abs(raw).max())


def make_motion(motion: MotionSpec, rows: int, cols: int) -> List[DisplacementField]:
    """Ground-truth pairwise fields, frame i to frame i + 1, sampled on the pixel grid."""
    z, x = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    u_axial, u_lateral = motion_at(motion, rows, cols, z, x)
    field = DisplacementField(u_axial, u_lateral)
    return [field for _ in range(motion.n_frames - 1)]


def motion_margin(motion: MotionSpec) -> float:
    """Extra scene border needed so the whole sequence stays populated."""
    per_frame = motion.step_px if motion.kind == "uniform_lateral" else motion.compression_peak
    return math.ceil(abs(per_frame) * (motion.n_frames - 1)) + PATCH_SIGMAS


def direct_motion(motion: MotionSpec, rows: int, cols: int,
                  reference_index: int = 0) -> List[DisplacementField]:
    """Direct displacement from the reference frame to every frame.

    Entry t satisfies frame_r(p) ~= frame_t(p + D_t(p)); later frames are reached by
    tracing the analytic motion forward, earlier ones by inverting each step.
    """
    if not 0 <= reference_index < motion.n_frames:
        raise ShapeMismatchError(f"reference_index {reference_index} outside [0, {motion.n_frames})")
    z0, x0 = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    fields = []
    for t in range(motion.n_frames):
        z, x = z0.copy(), x0.copy()
        if t > reference_index:
            for _ in range(t - reference_index):
                du_z, du_x = motion_at(motion, rows, cols, z, x)
                z, x = z + du_z, x + du_x
        elif t < reference_index:
            for _ in range(reference_index - t):
                z, x = _invert_step(motion, rows, cols, z, x)
        fields.append(DisplacementField(z - z0, x - x0))
    return fields


def _invert_step(motion: MotionSpec, rows: int, cols: int, z: np.ndarray, x: np.ndarray,
                 iterations: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """Solve q + u(q) = p by fixed-point iteration."""
    qz, qx = z.copy(), x.copy()
    for _ in range(iterations):
        du_z, du_x = motion_at(motion, rows, cols, qz, qx)
        qz, qx = z - du_z, x - du_x
    return qz, qx


# ==================== SEQUENCES ====================

def warp_scene_sequence(scene: Scene, spec: PhantomSpec, motion: MotionSpec,
                        noise: NoiseSpec) -> PhantomSequence:
    """Render every temporal position from analytically displaced scatterers.

    All frames share one normalization, 1 / max|clean frame 0|, then receive
    independent circular complex Gaussian noise of standard deviation noise.sigma.
    """
    clean = []
    current = scene
    for index in range(motion.n_frames):
        if index:
            du_z, du_x = motion_at(motion, spec.rows, spec.cols, current.row, current.col)
            current = current.moved(current.row + du_z, current.col + du_x)
        clean.append(render_complex(current, spec).data)

    peak = float(np.abs(clean[0]).max())
    gain = 1.0 / peak if peak > 0 else 1.0
    clean = [plane * gain for plane in clean]

    rng = np.random.default_rng(noise.seed)
    noisy = []
    for plane in clean:
        if noise.sigma > 0:
            draw = rng.standard_normal(plane.shape) + 1j * rng.standard_normal(plane.shape)
            plane = plane + draw * (noise.sigma / math.sqrt(2))
        noisy.append(plane)

    timestamps = tuple(range(motion.n_frames))
    pitch = (spec.pixel_pitch_axial, spec.pixel_pitch_lateral)
    logger.info(f"Rendered {motion.n_frames} {motion.kind} frames from {len(scene)} scatterers (noise sigma {noise.sigma})")
    return PhantomSequence(
        frames=FrameStack(tuple(ComplexImage(p, *pitch) for p in noisy), timestamps),
        fields=make_motion(motion, spec.rows, spec.cols),
        clean=FrameStack(tuple(ComplexImage(p, *pitch) for p in clean), timestamps),
    )


class PhantomService:
    """Builds complete simulated acquisitions: images, spectra and ground truth."""

    def __init__(self, spec: PhantomSpec, motion: MotionSpec, noise: NoiseSpec):
        self.spec = spec
        self.motion = motion
        self.noise = noise

    def sequence(self) -> PhantomSequence:
        scene = make_scene(self.spec, margin=motion_margin(self.motion))
        return warp_scene_sequence(scene, self.spec, self.motion, self.noise)

    def spectra(self, sequence: PhantomSequence, n_k: int = 0,
                fractional_bandwidth: float = 0.1) -> List[SpectralFrame]:
        """Spectral frames for a sequence; n_k defaults to twice the depth."""
        geometry = spectral_geometry(self.spec, n_k or 2 * self.spec.rows, fractional_bandwidth)
        return [synthesize_spectrum(frame, geometry) for frame in sequence.frames]
