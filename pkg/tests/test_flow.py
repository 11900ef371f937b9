from dataclasses import replace

import numpy as np
import pytest

from app.errors import ShapeMismatchError
from app.models.config_models import FlowConfig, MotionSpec, NoiseSpec, PhantomSpec
from app.models.raster_models import DisplacementField, Image
from app.display import log_compress
from app.services import flow_service
from app.services.flow_service import (
    BlockGridField,
    estimate_flow,
    fill_and_smooth,
    ncc_match_pass,
    ncc_surface,
    ncc_surface_direct,
    subpixel_peak,
    upsample_field,
)
from app.services.metrics_service import interior_mask, metric_rmse_field
from app.services.phantom_service import make_scene, motion_margin, warp_scene_sequence

SMALL_PASSES = FlowConfig(pass_windows=[(32, 16), (16, 8)], search_margin=[6, 3])


def _gaussian_neighbourhood(dz, dx):
    z, x = np.meshgrid([-1, 0, 1], [-1, 0, 1], indexing="ij")
    return np.exp(-((z - dz) ** 2 + (x - dx) ** 2))


def _grid(du_axial, du_lateral, valid=None, step=8):
    shape = np.shape(du_axial)
    return BlockGridField(
        center_rows=np.arange(shape[0]) * step + 4,
        center_cols=np.arange(shape[1]) * step + 4,
        du_axial=np.asarray(du_axial, dtype=float),
        du_lateral=np.asarray(du_lateral, dtype=float),
        ncc_peak=np.ones(shape),
        valid=np.ones(shape, dtype=bool) if valid is None else valid,
    )


def _blob(row, col, shape=(96, 96), width=3.0):
    z, x = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return Image(np.exp(-((z - row) ** 2 + (x - col) ** 2) / (2 * width ** 2)))


def _phantom_pair(step_px, sigma=0.0, rows=96, cols=96):
    spec = PhantomSpec(rows=rows, cols=cols, n_scatterers=int(rows * cols * 0.12), focus_row=rows // 2)
    motion = MotionSpec(kind="uniform_lateral", n_frames=2, step_px=step_px)
    scene = make_scene(spec, margin=motion_margin(motion))
    sequence = warp_scene_sequence(scene, spec, motion, NoiseSpec(sigma=sigma))
    ref, mov = (log_compress(frame, reference_max=1.0) for frame in sequence.frames)
    return ref, mov, sequence.fields[0]


class TestNccSurface:
    def test_fft_matches_direct(self, rng):
        for _ in range(5):
            template = rng.standard_normal((16, 16))
            region = rng.standard_normal((24, 22))
            np.testing.assert_allclose(ncc_surface(template, region), ncc_surface_direct(template, region), atol=1e-9)

    def test_constant_template(self, rng):
        assert not ncc_surface(np.ones((8, 8)), rng.standard_normal((12, 12))).any()


class TestSubpixel:
    def test_symmetric_peak(self):
        peak = subpixel_peak(_gaussian_neighbourhood(0, 0))
        assert abs(peak.axial) < 1e-12 and abs(peak.lateral) < 1e-12

    @pytest.mark.parametrize("dz,dx", [(0.3, -0.2), (-0.45, 0.45), (0.1, 0.0)])
    def test_exact_for_gaussians(self, dz, dx):
        peak = subpixel_peak(_gaussian_neighbourhood(dz, dx))
        assert peak.axial == pytest.approx(dz, abs=1e-9)
        assert peak.lateral == pytest.approx(dx, abs=1e-9)
        assert not peak.flagged

    def test_negative_corner_falls_back(self):
        values = _gaussian_neighbourhood(0.2, -0.1)
        values[0, 0] = -0.1
        expected_z = (np.log(values[0, 1]) - np.log(values[2, 1])) / (
            2 * np.log(values[0, 1]) - 4 * np.log(values[1, 1]) + 2 * np.log(values[2, 1]))
        expected_x = (np.log(values[1, 0]) - np.log(values[1, 2])) / (
            2 * np.log(values[1, 0]) - 4 * np.log(values[1, 1]) + 2 * np.log(values[1, 2]))
        peak = subpixel_peak(values)
        assert peak.axial == pytest.approx(expected_z, abs=1e-12)
        assert peak.lateral == pytest.approx(expected_x, abs=1e-12)

    def test_parabolic(self):
        values = np.array([[0.0, 0.5, 0.0], [0.6, 1.0, 0.8], [0.0, 0.7, 0.0]])
        peak = subpixel_peak(values, "parabolic")
        assert peak.axial == pytest.approx((0.5 - 0.7) / (1.0 - 4.0 + 1.4))
        assert peak.lateral == pytest.approx((0.6 - 0.8) / (1.2 - 4.0 + 1.6))

    def test_clamps_far_peaks(self):
        values = np.array([[0.1, 0.2, 0.1], [0.9, 0.5, 0.0], [0.1, 0.2, 0.1]])
        peak = subpixel_peak(values, "parabolic")
        assert peak.lateral == pytest.approx(-0.99)
        assert peak.flagged


class TestMatchPass:
    def test_identical_images(self, speckle_image):
        grid = ncc_match_pass(speckle_image, speckle_image, 16, 8)
        assert grid.valid.all()
        assert not grid.du_axial.any() and not grid.du_lateral.any()
        np.testing.assert_allclose(grid.ncc_peak, 1.0, atol=1e-12)

    def test_integer_shift(self, speckle_image):
        mov = Image(np.roll(speckle_image.data, (3, -2), axis=(0, 1)))
        grid = ncc_match_pass(speckle_image, mov, 16, 8, cfg=FlowConfig(search_margin=6))
        interior = (slice(1, -1), slice(1, -1))
        assert grid.valid[interior].all()
        np.testing.assert_array_equal(grid.du_axial[interior], 3.0)
        np.testing.assert_array_equal(grid.du_lateral[interior], -2.0)

    def test_constant_block_is_invalid(self, speckle_image):
        data = speckle_image.data.copy()
        data[:16, :16] = 0.5
        grid = ncc_match_pass(Image(data), Image(data), 16, 0)
        assert not grid.valid[0, 0]
        assert grid.valid[1:, 1:].all()

    def test_init_preshifts_windows(self, speckle_image):
        mov = Image(np.roll(speckle_image.data, (0, 9), axis=(0, 1)))
        init = DisplacementField.constant(96, 96, 0.0, 9.0)
        grid = ncc_match_pass(speckle_image, mov, 16, 8, init, FlowConfig(search_margin=2))
        np.testing.assert_array_equal(grid.du_lateral[1:-1, 1:-2], 9.0)

    def test_clipped_image_edge_is_not_a_search_border(self):
        grid = ncc_match_pass(_blob(4, 40), _blob(4, 42.5), 16, 0, cfg=FlowConfig(search_margin=6))
        assert grid.valid[0, 2]
        assert grid.ncc_peak[0, 2] < 1.0
        assert grid.du_axial[0, 2] == 0.0
        assert abs(grid.du_lateral[0, 2] - 2.5) < 0.2

    def test_peak_on_search_limit_is_invalid(self):
        ref, mov = _blob(40, 40), _blob(40, 45)
        assert not ncc_match_pass(ref, mov, 16, 0, cfg=FlowConfig(search_margin=3)).valid[2, 2]
        wide = ncc_match_pass(ref, mov, 16, 0, cfg=FlowConfig(search_margin=6))
        assert wide.valid[2, 2]
        assert wide.du_lateral[2, 2] == pytest.approx(5.0, abs=1e-6)

    def test_prominent_peak_accepted_below_min_ncc(self, speckle_image, rng):
        data = np.roll(speckle_image.data, (1, 2), axis=(0, 1))
        mov = Image(data + np.std(data) * rng.standard_normal(data.shape))
        strict = FlowConfig(search_margin=6, min_ncc=0.95)
        grid = ncc_match_pass(speckle_image, mov, 32, 16, cfg=strict)
        interior = (slice(1, -1), slice(1, -1))
        assert grid.valid[interior].sum() >= 7
        assert np.all(grid.ncc_peak[interior] < 0.95)
        assert np.all(np.abs(grid.du_lateral[interior][grid.valid[interior]] - 2.0) < 0.5)
        plain = ncc_match_pass(speckle_image, mov, 32, 16, cfg=strict.model_copy(update={"peak_prominence": 0.0}))
        assert not plain.valid[interior].any()

    def test_negative_prominence_rejected(self):
        with pytest.raises(ValueError):
            FlowConfig(peak_prominence=-1.0)

    def test_window_must_fit(self, speckle_image):
        with pytest.raises(ShapeMismatchError):
            ncc_match_pass(speckle_image, speckle_image, 128, 0)


class TestFillAndSmooth:
    def test_spike_replaced(self):
        u = np.full((5, 5), 5.0)
        u[2, 2] = 50.0
        filled = fill_and_smooth(_grid(u, np.zeros((5, 5))))
        assert filled.du_axial[2, 2] == pytest.approx(5.0)
        assert filled.filled[2, 2] and filled.valid.all()

    def test_smooth_grid_unchanged(self):
        z, x = np.meshgrid(np.arange(6), np.arange(7), indexing="ij")
        grid = _grid(0.1 * z, 0.2 * x)
        filled = fill_and_smooth(grid)
        np.testing.assert_array_equal(filled.du_axial, grid.du_axial)
        np.testing.assert_array_equal(filled.du_lateral, grid.du_lateral)
        assert not filled.filled.any()

    def test_checkerboard_ramp(self):
        z, x = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        ramp = 0.1 * x
        valid = (z + x) % 2 == 0
        filled = fill_and_smooth(_grid(ramp, np.zeros((8, 8)), valid))
        assert np.abs(filled.du_axial - ramp).max() < 0.1

    def test_all_invalid_warns(self):
        grid = _grid(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
        result = fill_and_smooth(grid)
        assert result.warning
        assert not result.valid.any()


class TestUpsample:
    def test_constant(self):
        field = upsample_field(_grid(np.full((3, 4), 2.5), np.zeros((3, 4))), 32, 40)
        np.testing.assert_array_equal(field.u_axial, 2.5)
        np.testing.assert_array_equal(field.u_lateral, 0.0)

    def test_linear_ramp_and_nodes(self, rng):
        z, x = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
        values = rng.standard_normal((4, 5))
        grid = _grid(values, 0.3 * x)
        field = upsample_field(grid, 40, 48)
        rows, cols = np.ix_(grid.center_rows, grid.center_cols)
        np.testing.assert_allclose(field.u_axial[rows, cols], values, atol=1e-12)
        centre_x = (np.arange(48)[None, :] - 4) / 8
        inside = (np.arange(48) >= 4) & (np.arange(48) <= 36)
        np.testing.assert_allclose(field.u_lateral[:, inside], np.broadcast_to(0.3 * centre_x, (40, 48))[:, inside], atol=1e-9)

    def test_clamped_outside(self):
        grid = _grid(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros((2, 2)))
        field = upsample_field(grid, 20, 20)
        assert field.u_axial[0, 0] == 1.0
        assert field.u_axial[19, 19] == 4.0

    def test_validity_needs_all_four(self):
        valid = np.ones((3, 3), dtype=bool)
        valid[0, 0] = False
        field = upsample_field(_grid(np.zeros((3, 3)), np.zeros((3, 3)), valid), 24, 24)
        assert not field.valid[0, 0] and not field.valid[8, 8]
        assert field.valid[20, 20]

    def test_grid_too_small(self):
        with pytest.raises(ShapeMismatchError):
            upsample_field(_grid(np.zeros((1, 3)), np.zeros((1, 3))), 8, 24)


class TestEstimateFlow:
    def test_identical_images(self, speckle_image):
        field = estimate_flow(speckle_image, speckle_image, SMALL_PASSES)
        assert not field.u_axial.any() and not field.u_lateral.any()

    def test_gain_and_offset_invariance(self, speckle_image):
        mov = Image(np.roll(speckle_image.data, (1, 2), axis=(0, 1)))
        base = estimate_flow(speckle_image, mov, SMALL_PASSES)
        scaled = estimate_flow(speckle_image.with_data(3 * speckle_image.data + 7),
                               mov.with_data(3 * mov.data + 7), SMALL_PASSES)
        np.testing.assert_allclose(scaled.u_lateral, base.u_lateral, atol=1e-9)
        np.testing.assert_allclose(scaled.u_axial, base.u_axial, atol=1e-9)

    def test_swap_symmetry(self, speckle_image):
        mov = Image(np.roll(speckle_image.data, (2, -3), axis=(0, 1)))
        forward = estimate_flow(speckle_image, mov, SMALL_PASSES)
        backward = estimate_flow(mov, speckle_image, SMALL_PASSES)
        interior = (slice(24, -24), slice(24, -24))
        diff = np.hypot(forward.u_axial + backward.u_axial, forward.u_lateral + backward.u_lateral)[interior]
        assert np.sqrt(np.mean(diff ** 2)) < 0.1

    @pytest.mark.parametrize("step,tolerance", [(5.0, 0.05), (5.3, 0.1), (0.25, 0.1), (0.5, 0.1)])
    def test_phantom_uniform_shift(self, step, tolerance):
        ref, mov, truth = _phantom_pair(step)
        field = estimate_flow(ref, mov, SMALL_PASSES)
        lateral, axial = metric_rmse_field(field, truth, interior_mask(field.shape, 16))
        assert np.hypot(lateral, axial) < tolerance

    def test_failed_refinement_keeps_previous_field(self, speckle_image, monkeypatch):
        mov = Image(np.roll(speckle_image.data, (1, 2), axis=(0, 1)))
        coarse = estimate_flow(speckle_image, mov, FlowConfig(pass_windows=[(32, 16)], search_margin=[6]))
        real_pass = flow_service.ncc_match_pass
        calls = []

        def failing_refinement(*args, **kwargs):
            grid = real_pass(*args, **kwargs)
            calls.append(grid)
            return grid if len(calls) == 1 else replace(grid, valid=np.zeros(grid.shape, dtype=bool))

        monkeypatch.setattr(flow_service, "ncc_match_pass", failing_refinement)
        field = estimate_flow(speckle_image, mov, SMALL_PASSES)
        assert len(calls) == 2
        np.testing.assert_array_equal(field.u_lateral, coarse.u_lateral)
        np.testing.assert_array_equal(field.u_axial, coarse.u_axial)

    def test_shape_mismatch(self, speckle_image):
        with pytest.raises(ShapeMismatchError):
            estimate_flow(speckle_image, Image(np.zeros((10, 10))))
