"""Tests for Gaussian prior pseudo labels: moment fit, rendering, enhancement, trichotomy."""

import numpy as np
import pytest

from src.gppl import (
    RHO_LIMIT,
    SIGMA_FLOOR,
    CamMap,
    EmptyCamError,
    GaussianParams,
    PseudoLabel,
    binary_split,
    enhance_cam,
    fit_weighted_gaussian,
    gaussian_density,
    make_pseudo_label,
    render_gaussian,
    trichotomize,
)


def blob(h=32, w=32, cy=14.0, cx=17.0, sy=4.0, sx=6.0):
    ys, xs = np.indices((h, w), dtype=np.float64)
    return np.exp(-((xs - cx) ** 2 / (2 * sx ** 2) + (ys - cy) ** 2 / (2 * sy ** 2)))


def assert_params_close(a: GaussianParams, b: GaussianParams, rtol: float):
    for name in ("mu_x", "mu_y", "sigma_x", "sigma_y"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), rel=rtol), name
    assert a.rho == pytest.approx(b.rho, rel=rtol, abs=1e-12)


class TestFitWeightedGaussian:

    def test_uniform_grid(self):
        params = fit_weighted_gaussian(CamMap(np.ones((3, 3))))
        assert params.mu_x == pytest.approx(1.0, rel=1e-9)
        assert params.mu_y == pytest.approx(1.0, rel=1e-9)
        assert params.sigma_x ** 2 == pytest.approx(2.0 / 3.0, rel=1e-9)
        assert params.sigma_y ** 2 == pytest.approx(2.0 / 3.0, rel=1e-9)
        assert params.rho == pytest.approx(0.0, abs=1e-12)

    def test_point_mass(self):
        cam = np.zeros((6, 5))
        cam[3, 2] = 0.7
        params = fit_weighted_gaussian(cam)
        assert params.mu_x == pytest.approx(2.0, rel=1e-12)
        assert params.mu_y == pytest.approx(3.0, rel=1e-12)
        assert params.sigma_x == SIGMA_FLOOR
        assert params.sigma_y == SIGMA_FLOOR
        assert params.rho == 0.0

    def test_two_point_mass_is_clamped(self):
        cam = np.zeros((3, 3))
        cam[0, 0] = cam[2, 2] = 1.0
        params = fit_weighted_gaussian(cam)
        assert params.mu_x == pytest.approx(1.0, rel=1e-9)
        assert params.mu_y == pytest.approx(1.0, rel=1e-9)
        assert params.sigma_x ** 2 == pytest.approx(1.0, rel=1e-9)
        assert params.sigma_y ** 2 == pytest.approx(1.0, rel=1e-9)
        assert params.rho == RHO_LIMIT

    def test_x_is_column_and_y_is_row(self):
        # grid centred on the blob so truncation at the borders cannot move the mean
        params = fit_weighted_gaussian(blob(h=29, w=35))
        assert params.mu_x == pytest.approx(17.0, abs=0.05)
        assert params.mu_y == pytest.approx(14.0, abs=0.05)
        assert params.sigma_x > params.sigma_y

    def test_empty_cam_rejected(self):
        with pytest.raises(EmptyCamError):
            fit_weighted_gaussian(np.zeros((4, 4)))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        cam = np.zeros((32, 32))
        cam[12:20, 11:21] = rng.random((8, 10))
        base = fit_weighted_gaussian(cam)
        for dy, dx in [(3, 5), (-4, 2), (6, -7), (-9, -8)]:
            moved = fit_weighted_gaussian(np.roll(cam, (dy, dx), axis=(0, 1)))
            assert moved.mu_x == pytest.approx(base.mu_x + dx, rel=1e-6)
            assert moved.mu_y == pytest.approx(base.mu_y + dy, rel=1e-6)
            assert moved.sigma_x == pytest.approx(base.sigma_x, rel=1e-6)
            assert moved.sigma_y == pytest.approx(base.sigma_y, rel=1e-6)
            assert moved.rho == pytest.approx(base.rho, rel=1e-6, abs=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            cam = rng.random((12, 10))
            c = float(rng.uniform(0.01, 100.0))
            assert_params_close(fit_weighted_gaussian(cam * c), fit_weighted_gaussian(cam), rtol=1e-9)


class TestRenderGaussian:

    def test_peak_of_unnormalized_density(self):
        params = GaussianParams(mu_x=4.0, mu_y=3.0, sigma_x=2.0, sigma_y=1.5, rho=0.0)
        density = gaussian_density(params, 8, 9)
        assert density[3, 4] == pytest.approx(1.0 / (2 * np.pi * 2.0 * 1.5), rel=1e-12)

    def test_normalized_peak_is_one(self):
        params = GaussianParams(mu_x=10.3, mu_y=7.8, sigma_x=3.0, sigma_y=5.0, rho=0.4)
        assert render_gaussian(params, 20, 24).values.max() == 1.0

    def test_density_integrates_to_one(self):
        params = GaussianParams(mu_x=50.0, mu_y=50.0, sigma_x=5.0, sigma_y=5.0, rho=0.0)
        assert gaussian_density(params, 101, 101).sum() == pytest.approx(1.0, rel=0.01)

    def test_correlated_density_integrates_to_one(self):
        params = GaussianParams(mu_x=50.0, mu_y=50.0, sigma_x=6.0, sigma_y=4.0, rho=-0.6)
        assert gaussian_density(params, 101, 101).sum() == pytest.approx(1.0, rel=0.01)

    def test_degenerate_fit_renders_finite(self):
        cam = np.zeros((5, 5))
        cam[2, 2] = 1.0
        rendered = render_gaussian(fit_weighted_gaussian(cam), 5, 5).values
        assert np.all(np.isfinite(rendered))
        assert rendered[2, 2] == 1.0


class TestEnhanceCam:

    def test_examples(self):
        cam = CamMap(np.array([[0.9, 0.1, 0.3]]), source_class=2)
        gmap = CamMap(np.array([[0.0, 0.8, 0.6]]))
        out = enhance_cam(cam, gmap, t_gauss=0.7)
        np.testing.assert_array_equal(out.values, [[0.9, 0.8, 0.3]])
        assert out.source_class == 2

    def test_never_lowers_cam(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            cam, gmap = rng.random((8, 8)), rng.random((8, 8))
            assert np.all(enhance_cam(cam, gmap).values >= cam)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            enhance_cam(np.zeros((3, 3)), np.zeros((3, 4)))


class TestTrichotomize:

    def test_examples(self):
        label = trichotomize(np.array([[0.6, 0.001, 0.1]]))
        np.testing.assert_array_equal(label.classes, [[PseudoLabel.FG, PseudoLabel.BG, PseudoLabel.CONFLICT]])
        np.testing.assert_array_equal(label.g, [[1, 0, 0]])
        np.testing.assert_array_equal(label.w, [[1, 1, 0]])

    def test_thresholds_are_strict(self):
        label = trichotomize(np.array([[0.5, 0.004]]))
        assert label.classes.tolist() == [[PseudoLabel.CONFLICT, PseudoLabel.CONFLICT]]

    def test_threshold_order_enforced(self):
        with pytest.raises(ValueError):
            trichotomize(np.zeros((2, 2)), t_fg=0.3, t_bg=0.3)
        with pytest.raises(ValueError):
            trichotomize(np.zeros((2, 2)), t_fg=1.5, t_bg=0.1)

    def test_partition_and_monotonicity_on_random_cams(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            cam = rng.random((16, 16)) ** rng.uniform(0.5, 4.0)
            t_bg = float(rng.uniform(0.0, 0.3))
            t_fg = float(rng.uniform(t_bg + 0.01, 1.0))
            counts = trichotomize(cam, t_fg, t_bg).counts()
            assert counts["fg"] + counts["bg"] + counts["conflict"] == cam.size

            higher_fg = trichotomize(cam, min(t_fg + 0.1, 1.0), t_bg).counts()
            assert higher_fg["fg"] <= counts["fg"]
            lower_bg = trichotomize(cam, t_fg, t_bg / 2).counts()
            assert lower_bg["bg"] <= counts["bg"]

    def test_w_zero_exactly_on_conflict(self):
        label = trichotomize(np.random.default_rng(3).random((10, 10)))
        np.testing.assert_array_equal(label.w == 0, label.classes == PseudoLabel.CONFLICT)


class TestPseudoLabelCodec:

    def test_plane_codes(self):
        plane = np.array([[0, 128, 255]], dtype=np.uint8)
        label = PseudoLabel.from_plane(plane)
        assert label.counts() == {"fg": 1, "bg": 1, "conflict": 1}

    def test_unknown_codes_rejected(self):
        with pytest.raises(ValueError):
            PseudoLabel.from_plane(np.array([[0, 7]], dtype=np.uint8))


class TestMakePseudoLabel:

    def test_full_mode_fills_object_interior(self):
        cam = CamMap(blob(sy=3.0, sx=3.0) * 0.6)
        label, enhanced = make_pseudo_label(cam, "full")
        assert np.all(enhanced.values >= cam.values)
        assert label.classes[14, 17] == PseudoLabel.FG
        assert label.classes[0, 0] == PseudoLabel.BG

    def test_no_gauss_thresholds_raw_cam(self):
        cam = CamMap(blob() * 0.6)
        label, enhanced = make_pseudo_label(cam, "no-gauss")
        assert enhanced is cam
        np.testing.assert_array_equal(label.classes, trichotomize(cam).classes)

    def test_no_threshold_has_no_conflict(self):
        label, enhanced = make_pseudo_label(CamMap(blob()), "no-threshold")
        assert label.counts()["conflict"] == 0
        np.testing.assert_array_equal(label.classes, binary_split(enhanced).classes)

    def test_empty_cam_rejected_in_every_mode(self):
        for mode in ("full", "no-gauss", "no-threshold"):
            with pytest.raises(EmptyCamError):
                make_pseudo_label(CamMap(np.zeros((8, 8))), mode)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            make_pseudo_label(CamMap(blob()), "crf")
