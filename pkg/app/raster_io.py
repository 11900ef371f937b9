"""OCER raster container: bit-exact little-endian storage for every stage's artifacts.

Layout: magic "OCER" | version u16 | dtype code u8 | ndim u8 | dims u32 x ndim | payload.
The payload is row-major with the innermost dimension last.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from app.errors import (
    BadMagicError,
    NonFiniteError,
    RasterIOError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from app.models.raster_models import ComplexImage, DisplacementField, Image

logger = logging.getLogger(__name__)

MAGIC = b"OCER"
VERSION = 1
MAX_DIM = 2 ** 32 - 1

# dtype code -> little-endian numpy dtype
DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<c8"),
    3: np.dtype("u1"),
}

PathLike = Union[str, Path]


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.bool_ or array.dtype == np.uint8:
        return 3
    if array.dtype == np.float32:
        return 0
    if array.dtype == np.float64:
        return 1
    if np.iscomplexobj(array):
        # complex128 is narrowed to interleaved f32 pairs
        return 2
    raise UnsupportedDtypeError(f"cannot store dtype {array.dtype} in a raster file")


def encode_raster(array) -> bytes:
    """Serialize an array (or Image / ComplexImage) to OCER bytes."""
    if isinstance(array, (Image, ComplexImage)):
        array = array.data
    array = np.asarray(array)
    code = _dtype_code(array)
    if code != 3 and not np.all(np.isfinite(array)):
        raise NonFiniteError("refusing to write a raster with NaN or Inf values")
    if array.ndim > 255:
        raise ShapeMismatchError(f"too many dimensions: {array.ndim}")
    if any(dim > MAX_DIM for dim in array.shape):
        raise ShapeMismatchError(f"dimension exceeds u32 range: {array.shape}")
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + payload


def decode_raster(blob: bytes) -> np.ndarray:
    """Parse OCER bytes back into an array with the encoded dims and dtype."""
    if len(blob) < 8:
        raise TruncatedPayloadError(f"header needs 8 bytes, got {len(blob)}")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"raster version {version} is not supported")
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {code}")
    offset = 8 + 4 * ndim
    if len(blob) < offset:
        raise TruncatedPayloadError("header ends before all dims are listed")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(blob) - offset
    if available < expected:
        raise TruncatedPayloadError(f"payload has {available} bytes, dims {dims} need {expected}")
    if available > expected:
        raise TruncatedPayloadError(f"payload has {available - expected} trailing bytes")
    return np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=offset).reshape(dims).copy()


def write_raster(array, path: PathLike) -> None:
    blob = encode_raster(array)
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise RasterIOError(path, e) from e
    logger.debug(f"Wrote raster {path} ({len(blob)} bytes)")


def read_raster(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise RasterIOError(path, e) from e
    try:
        return decode_raster(blob)
    except (BadMagicError, TruncatedPayloadError, UnsupportedDtypeError, UnsupportedVersionError) as e:
        e.detail = f"{path}: {e.detail}"
        raise


# ==================== DISPLACEMENT FIELDS ====================

def write_fields(fields, prefix: PathLike) -> None:
    """Write one field or a list of fields as <prefix>_axial/_lateral/_mask planes."""
    if isinstance(fields, DisplacementField):
        fields = [fields]
    prefix = str(prefix)
    write_raster(np.stack([f.u_axial for f in fields]), f"{prefix}_axial.ocer")
    write_raster(np.stack([f.u_lateral for f in fields]), f"{prefix}_lateral.ocer")
    write_raster(np.stack([f.valid for f in fields]).astype(np.uint8), f"{prefix}_mask.ocer")


def read_fields(prefix: PathLike) -> list:
    prefix = str(prefix)
    axial = read_raster(f"{prefix}_axial.ocer")
    lateral = read_raster(f"{prefix}_lateral.ocer")
    mask = read_raster(f"{prefix}_mask.ocer")
    if axial.ndim == 2:
        axial, lateral, mask = axial[None], lateral[None], mask[None]
    if not axial.shape == lateral.shape == mask.shape:
        raise ShapeMismatchError(f"field planes for {prefix} disagree in shape")
    return [DisplacementField(a, l, m.astype(bool)) for a, l, m in zip(axial, lateral, mask)]


# ==================== PREVIEWS ====================

def write_pgm(image, path: PathLike) -> None:
    """8-bit P5 preview, min-max scaled. Lossy, for eyes only."""
    data = image.data if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    low, high = float(data.min()), float(data.max())
    scale = 255.0 / (high - low) if high > low else 0.0
    pixels = np.round((data - low) * scale).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + pixels.tobytes())
    except OSError as e:
        raise RasterIOError(path, e) from e
