import numpy as np
import pytest

from tools.baseline_tools import (
    TvSettings,
    fbp_reconstruct,
    gradient,
    gradient_adjoint,
    ramp_filter,
    soft_threshold,
    tv_lambda_for_dose,
    tv_reconstruct,
)
from tools.geometry_tools import FanBeamGeometry, build_system_matrix, forward_project
from tools.simulation_tools import generate_phantom
from utils.error_handling import ValidationError


@pytest.fixture(scope="module")
def disk_setup():
    geom = FanBeamGeometry(
        n_views=96,
        n_bins=72,
        image_size=(32, 32),
        pixel_size=2.0,
        detector_pixel=2.0,
        source_to_detector=1000.0,
        source_to_isocenter=500.0,
    )
    A = build_system_matrix(geom)
    disk = generate_phantom("disk", geom.image_size).image
    return A, disk, forward_project(A, disk)


def test_soft_threshold():
    assert soft_threshold(0.7, 0.5) == pytest.approx(0.2)
    assert soft_threshold(-0.7, 0.5) == pytest.approx(-0.2)
    assert soft_threshold(0.3, 0.5) == 0.0
    assert soft_threshold(0.7, 0.0) == pytest.approx(0.7)


def test_gradient_adjoint_identity(rng):
    x = rng.standard_normal((7, 9))
    g = rng.standard_normal((2, 7, 9))
    assert np.vdot(gradient(x), g) == pytest.approx(np.vdot(x, gradient_adjoint(g)), rel=1e-12)


def test_ramp_filter_has_no_dc_and_hann_zeroes_nyquist():
    ramlak = ramp_filter(64, 1.0)
    hann = ramp_filter(64, 1.0, apodization="hann")
    assert ramlak.size == 128
    assert abs(ramlak[0]) < 0.01 * np.max(ramlak)
    assert hann[64] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValidationError):
        ramp_filter(64, 1.0, apodization="shepp")


def test_fbp_of_zero_is_zero(disk_setup):
    A, _, _ = disk_setup
    image = fbp_reconstruct(A.geometry, np.zeros(A.geometry.sinogram_shape))
    assert np.all(image == 0)


def test_fbp_is_linear(disk_setup, rng):
    A, _, y = disk_setup
    noise = rng.standard_normal(y.shape)
    lhs = fbp_reconstruct(A.geometry, 2.0 * y + noise)
    rhs = 2.0 * fbp_reconstruct(A.geometry, y) + fbp_reconstruct(A.geometry, noise)
    assert np.allclose(lhs, rhs, atol=1e-12 * np.max(np.abs(rhs)))


def test_fbp_recovers_the_disk_interior(disk_setup):
    A, disk, y = disk_setup
    image = fbp_reconstruct(A.geometry, y)
    centers = np.arange(32) - 15.5
    gx, gy = np.meshgrid(centers, centers)
    interior = gx ** 2 + gy ** 2 <= 6.0 ** 2
    assert np.mean(image[interior]) == pytest.approx(0.02, rel=0.05)


def test_fbp_rejects_a_wrong_sinogram(disk_setup):
    A, _, _ = disk_setup
    with pytest.raises(ValidationError):
        fbp_reconstruct(A.geometry, np.zeros((3, 3)))


def test_tv_settings_validation():
    with pytest.raises(ValidationError):
        TvSettings(lam=0.0)
    with pytest.raises(ValidationError):
        TvSettings(lam=0.01, mu=-1.0)
    with pytest.raises(ValidationError):
        TvSettings(lam=0.01, iters=0)


def test_tv_lambda_follows_the_dose_table():
    assert tv_lambda_for_dose(1e5) == 0.01
    assert tv_lambda_for_dose(5e3) == 0.03
    # untuned doses take the nearest tuned level
    assert tv_lambda_for_dose(4e3) == 0.03
    assert tv_lambda_for_dose(1.2e4) == 0.02


def test_tv_primal_residual_drops(A16, rng):
    disk = generate_phantom("disk", (16, 16)).image
    y = forward_project(A16, disk) + 0.005 * rng.standard_normal(A16.geometry.sinogram_shape)
    _, report = tv_reconstruct(A16, y, TvSettings(lam=0.02, iters=300))
    assert len(report.primal_residuals) == 300
    assert report.primal_residuals[-1] <= 0.1 * report.primal_residuals[0]


def test_tv_with_vanishing_weight_fits_the_data(A16):
    disk = generate_phantom("disk", (16, 16)).image
    y = forward_project(A16, disk)
    weak, _ = tv_reconstruct(A16, y, TvSettings(lam=1e-12, mu=1.0))
    strong, _ = tv_reconstruct(A16, y, TvSettings(lam=1.0, mu=1.0, iters=50))
    weak_misfit = np.linalg.norm(forward_project(A16, weak) - y)
    strong_misfit = np.linalg.norm(forward_project(A16, strong) - y)
    assert weak_misfit < 1e-2 * np.linalg.norm(y)
    assert weak_misfit < strong_misfit


def test_tv_rejects_a_wrong_warm_start(A16):
    y = np.zeros(A16.geometry.sinogram_shape)
    with pytest.raises(ValidationError):
        tv_reconstruct(A16, y, TvSettings(lam=0.01, iters=1), x0=np.zeros((3, 3)))
