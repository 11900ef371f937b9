import struct

import numpy as np
import pytest

from app.errors import (
    BadMagicError,
    NonFiniteError,
    RasterIOError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from app.models.raster_models import DisplacementField, FrameStack, Image, SpectralFrame
from app.raster_io import decode_raster, encode_raster, read_fields, read_raster, write_fields, write_pgm, write_raster


class TestEncoding:
    def test_header_layout(self):
        blob = encode_raster(np.zeros((2, 3), dtype=np.float64))
        assert blob[:4] == b"OCER"
        version, code, ndim = struct.unpack_from("<HBB", blob, 4)
        assert (version, code, ndim) == (1, 1, 2)
        assert struct.unpack_from("<2I", blob, 8) == (2, 3)
        assert len(blob) == 8 + 8 + 6 * 8

    def test_float64_is_bit_exact(self, rng):
        data = rng.standard_normal((5, 7))
        assert np.array_equal(decode_raster(encode_raster(data)), data)

    def test_complex_is_stored_as_c8(self, rng):
        data = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        out = decode_raster(encode_raster(data))
        assert out.dtype == np.complex64
        np.testing.assert_allclose(out, data, rtol=1e-6)

    def test_mask_round_trips_as_u8(self):
        mask = np.array([[True, False], [False, True]])
        out = decode_raster(encode_raster(mask))
        assert out.dtype == np.uint8
        assert np.array_equal(out.astype(bool), mask)

    def test_bad_magic(self):
        blob = b"XXXX" + encode_raster(np.zeros(3))[4:]
        with pytest.raises(BadMagicError):
            decode_raster(blob)

    def test_unsupported_version(self):
        blob = bytearray(encode_raster(np.zeros(3)))
        blob[4:6] = struct.pack("<H", 9)
        with pytest.raises(UnsupportedVersionError):
            decode_raster(bytes(blob))

    def test_unknown_dtype_code(self):
        blob = bytearray(encode_raster(np.zeros(3)))
        blob[6] = 7
        with pytest.raises(UnsupportedDtypeError):
            decode_raster(bytes(blob))

    def test_truncated_payload(self):
        blob = encode_raster(np.zeros((4, 4)))
        with pytest.raises(TruncatedPayloadError):
            decode_raster(blob[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(TruncatedPayloadError):
            decode_raster(encode_raster(np.zeros(2)) + b"\x00")

    def test_refuses_nan(self):
        with pytest.raises(NonFiniteError):
            encode_raster(np.array([1.0, np.nan]))


class TestFiles:
    def test_missing_file(self, tmp_path):
        with pytest.raises(RasterIOError) as info:
            read_raster(tmp_path / "missing.ocer")
        assert info.value.exit_code == 2

    def test_write_and_read(self, tmp_path, rng):
        data = rng.standard_normal((3, 8, 8))
        write_raster(data, tmp_path / "stack.ocer")
        assert np.array_equal(read_raster(tmp_path / "stack.ocer"), data)

    def test_fields_round_trip(self, tmp_path, rng):
        valid = rng.random((6, 5)) > 0.3
        fields = [DisplacementField(rng.standard_normal((6, 5)), rng.standard_normal((6, 5)), valid)
                  for _ in range(2)]
        write_fields(fields, tmp_path / "f")
        back = read_fields(tmp_path / "f")
        assert len(back) == 2
        for a, b in zip(fields, back):
            assert np.array_equal(a.u_axial, b.u_axial)
            assert np.array_equal(a.valid, b.valid)

    def test_pgm_header(self, tmp_path):
        write_pgm(Image(np.arange(12.0).reshape(3, 4)), tmp_path / "p.pgm")
        blob = (tmp_path / "p.pgm").read_bytes()
        assert blob.startswith(b"P5\n4 3\n255\n")
        assert blob[-1] == 255


class TestContainers:
    def test_invalid_sites_are_zeroed(self):
        field = DisplacementField(np.ones((2, 2)), np.ones((2, 2)), np.array([[True, False], [True, True]]))
        assert field.u_axial[0, 1] == 0 and field.u_lateral[0, 1] == 0

    def test_nan_field_rejected(self):
        with pytest.raises(NonFiniteError):
            DisplacementField(np.full((2, 2), np.nan), np.zeros((2, 2)))

    def test_stack_needs_two_frames(self):
        from app.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            FrameStack((Image(np.zeros((2, 2))),))

    def test_spectral_pitch(self):
        frame = SpectralFrame(np.zeros((8, 2)), 1.0, 1.7)
        assert frame.dk == pytest.approx(0.1)
        assert frame.axial_pitch == pytest.approx(np.pi / 0.8)
