import numpy as np
import pytest

from app.errors import MetricError, RasterIOError, ShapeMismatchError
from app.models.raster_models import DisplacementField, Image
from app.services.metrics_service import (
    MetricRow,
    field_gradient,
    format_metrics_csv,
    interior_mask,
    metric_ncc,
    metric_rmse_field,
    metric_rmse_image,
    write_metrics_csv,
)


class TestInteriorMask:
    def test_border(self):
        mask = interior_mask((8, 10), 2)
        assert mask.sum() == 4 * 6
        assert not mask[1].any() and mask[2, 2:8].all()

    def test_border_too_wide(self):
        assert not interior_mask((8, 8), 4).any()


class TestImageMetrics:
    def test_rmse_of_offset(self, speckle_image):
        assert metric_rmse_image(speckle_image, speckle_image) == 0.0
        shifted = speckle_image.with_data(speckle_image.data + 0.25)
        assert metric_rmse_image(shifted, speckle_image) == pytest.approx(0.25)

    def test_rmse_respects_mask(self):
        truth = Image(np.zeros((4, 4)))
        est = truth.with_data(np.pad(np.ones((2, 2)), 1))
        assert metric_rmse_image(est, truth, interior_mask((4, 4), 1)) == pytest.approx(1.0)
        assert metric_rmse_image(est, truth) == pytest.approx(0.5)

    def test_empty_mask(self, speckle_image):
        with pytest.raises(MetricError):
            metric_rmse_image(speckle_image, speckle_image, np.zeros((96, 96), dtype=bool))

    def test_shape_mismatch(self, speckle_image):
        with pytest.raises(ShapeMismatchError):
            metric_ncc(speckle_image, Image(np.zeros((4, 4))))

    def test_ncc(self, speckle_image):
        assert metric_ncc(speckle_image, speckle_image) == pytest.approx(1.0)
        assert metric_ncc(speckle_image.with_data(-speckle_image.data), speckle_image) == pytest.approx(-1.0)
        affine = speckle_image.with_data(4.0 * speckle_image.data - 2.0)
        assert metric_ncc(affine, speckle_image) == pytest.approx(1.0)

    def test_rmse_matches_loop(self, rng):
        est, truth = rng.standard_normal((2, 12, 9))
        total = 0.0
        for i in range(12):
            for j in range(9):
                total += (est[i, j] - truth[i, j]) ** 2
        assert metric_rmse_image(Image(est), Image(truth)) == pytest.approx(np.sqrt(total / 108), abs=1e-12)

    def test_ncc_with_equal_noise(self, rng):
        truth = rng.standard_normal((128, 128))
        noisy = truth + truth.std() * rng.standard_normal((128, 128))
        assert metric_ncc(Image(noisy), Image(truth)) == pytest.approx(1 / np.sqrt(2), abs=0.05)

    def test_ncc_of_constant(self, speckle_image):
        with pytest.raises(MetricError):
            metric_ncc(Image(np.ones((96, 96))), speckle_image)


class TestFieldMetrics:
    def test_constant_error(self):
        est = DisplacementField.constant(8, 8, 0.2, 0.5)
        lateral, axial = metric_rmse_field(est, DisplacementField.zeros(8, 8))
        assert lateral == pytest.approx(0.5) and axial == pytest.approx(0.2)

    def test_matches_loop(self, rng):
        est = DisplacementField(*rng.standard_normal((2, 6, 7)))
        truth = DisplacementField(*rng.standard_normal((2, 6, 7)))
        lateral = axial = 0.0
        for i in range(6):
            for j in range(7):
                lateral += (est.u_lateral[i, j] - truth.u_lateral[i, j]) ** 2
                axial += (est.u_axial[i, j] - truth.u_axial[i, j]) ** 2
        got = metric_rmse_field(est, truth)
        assert got[0] == pytest.approx(np.sqrt(lateral / 42), abs=1e-12)
        assert got[1] == pytest.approx(np.sqrt(axial / 42), abs=1e-12)

    def test_pooled_over_pairs(self):
        est = [DisplacementField.constant(4, 4, 0.0, 1.0), DisplacementField.zeros(4, 4)]
        truth = [DisplacementField.zeros(4, 4)] * 2
        lateral, axial = metric_rmse_field(est, truth)
        assert lateral == pytest.approx(np.sqrt(0.5)) and axial == 0.0

    def test_invalid_pixels_ignored(self):
        valid = np.ones((4, 4), dtype=bool)
        valid[0] = False
        est = DisplacementField(np.zeros((4, 4)), np.zeros((4, 4)), valid)
        truth = DisplacementField(np.zeros((4, 4)), np.where(valid, 0.0, 9.0))
        assert metric_rmse_field(est, truth) == (0.0, 0.0)

    def test_nothing_valid(self):
        est = DisplacementField(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))
        with pytest.raises(MetricError):
            metric_rmse_field(est, DisplacementField.zeros(4, 4))

    def test_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            metric_rmse_field([DisplacementField.zeros(4, 4)] * 2, [DisplacementField.zeros(4, 4)])

    def test_gradient(self):
        assert field_gradient(DisplacementField.constant(8, 8, 1.0, 2.0)) == 0.0
        z, x = np.meshgrid(np.arange(8.0), np.arange(8.0), indexing="ij")
        assert field_gradient(DisplacementField(np.zeros((8, 8)), 0.1 * x)) == pytest.approx(0.1)


class TestCsv:
    def test_values_round_trip(self, tmp_path):
        rows = [MetricRow("image_rmse_proposed", 0.1 + 0.2, "0"), MetricRow("field_gradient_final", 1 / 3, "all")]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "metric,value,frame_pair"
        assert float(lines[1].split(",")[1]) == 0.1 + 0.2
        assert lines[2].endswith(",all")
        assert format_metrics_csv(rows) == lines

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(RasterIOError):
            write_metrics_csv([], tmp_path / "missing" / "metrics.csv")
