import json

import numpy as np
import pytest

from tools.geometry_tools import FanBeamGeometry, build_system_matrix, forward_project
from tools.simulation_tools import (
    NoiseModel,
    RawCounts,
    counts_to_sinogram,
    dose_schedule,
    generate_phantom,
    load_dataset,
    sample_counts,
    simulate_counts,
    simulate_dataset,
    write_dataset,
)
from utils.constants import DOSE_LEVELS, UNIVERSAL_DOSE_LEVELS
from utils.error_handling import ValidationError


@pytest.fixture(scope="module")
def A32():
    geom = FanBeamGeometry(
        n_views=48,
        n_bins=64,
        image_size=(32, 32),
        pixel_size=2.0,
        detector_pixel=2.0,
        source_to_detector=1000.0,
        source_to_isocenter=500.0,
    )
    return build_system_matrix(geom)


def test_shepp_logan_peaks_at_the_skull_with_zero_background():
    phantom = generate_phantom("shepp-logan", (64, 64))
    image = phantom.image
    assert image[0, 0] == 0.0
    assert image[32, 32] < image.max()
    skull_row = image[32]
    first = np.flatnonzero(skull_row)[0]
    assert skull_row[first] == pytest.approx(image.max())


def test_same_seed_gives_identical_phantoms():
    a = generate_phantom("random", (32, 32), seed=11).image
    b = generate_phantom("random", (32, 32), seed=11).image
    c = generate_phantom("random", (32, 32), seed=12).image
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_random_phantoms_stay_in_the_attenuation_range():
    for seed in range(100):
        image = generate_phantom("random", (16, 16), seed=seed).image
        assert image.min() >= 0.0
        assert image.max() <= 0.1


def test_random_phantom_is_a_water_disk_with_ellipses():
    phantom = generate_phantom("random", (64, 64), seed=3)
    assert 3 <= len(phantom.descriptor) - 1 <= 8
    assert phantom.image[0, 0] == 0.0
    assert phantom.descriptor[0].attenuation == pytest.approx(0.02)


def test_unknown_preset_and_small_sizes_are_rejected():
    with pytest.raises(ValidationError):
        generate_phantom("walnut", (32, 32))
    with pytest.raises(ValidationError):
        generate_phantom("disk", (8, 8))


def test_noise_model_validates_its_fields():
    with pytest.raises(ValidationError):
        NoiseModel(dose=0.0)
    with pytest.raises(ValidationError):
        NoiseModel(dose=1e4, electronic_variance=-1.0)


def test_noiseless_limit_recovers_line_integrals(A32):
    x = generate_phantom("shepp-logan", (32, 32)).image
    nm = NoiseModel(dose=1e12, electronic_variance=0.0, rng_seed=4)
    y = counts_to_sinogram(simulate_counts(A32, x, nm), nm)
    ax = forward_project(A32, x)
    assert np.max(np.abs(y - ax)) / np.max(np.abs(ax)) < 1e-3


def test_counts_are_reproducible_from_the_seed(A32):
    x = generate_phantom("disk", (32, 32)).image
    nm = NoiseModel(dose=1e4, rng_seed=99)
    first = simulate_counts(A32, x, nm).counts
    second = simulate_counts(A32, x, nm).counts
    assert np.array_equal(first, second)


@pytest.mark.parametrize("mean", [4.0, 1e3])
def test_monte_carlo_mean_of_counts(mean):
    draws = 100_000
    expected = np.full(draws, mean)
    counts = sample_counts(expected, NoiseModel(dose=1e4, electronic_variance=10.0, rng_seed=8))
    standard_error = np.sqrt((mean + 10.0) / draws)
    assert abs(counts.mean() - mean) < 3.0 * standard_error


def test_zero_image_gives_dose_level_counts(A32):
    nm = NoiseModel(dose=1e5, electronic_variance=0.0, rng_seed=1)
    raw = simulate_counts(A32, np.zeros((32, 32)), nm)
    assert raw.counts.mean() == pytest.approx(1e5, rel=1e-3)
    assert raw.underflow_count == 0


def test_log_transform_and_floor():
    nm = NoiseModel(dose=1e4)
    raw = RawCounts(counts=np.array([[1e4, 0.0, -3.0, 2e4]]), dose=1e4)
    y = counts_to_sinogram(raw, nm)
    assert y[0, 0] == 0.0
    assert y[0, 1] == pytest.approx(np.log(1e4))
    assert y[0, 2] == pytest.approx(np.log(1e4))
    assert y[0, 3] < 0.0
    assert raw.below_floor == 2


def test_sinogram_dimension_mismatch_is_rejected():
    nm = NoiseModel(dose=1e4)
    with pytest.raises(ValidationError):
        counts_to_sinogram(RawCounts(np.ones(10), 1e4), nm, shape=(3, 4))


def test_sinogram_noise_variance_grows_as_dose_decreases(A32):
    assert tuple(DOSE_LEVELS) == (1e5, 5e4, 1e4, 5e3)
    x = generate_phantom("shepp-logan", (32, 32)).image
    ax = forward_project(A32, x)
    variances = []
    for dose in DOSE_LEVELS:
        per_dose = []
        for seed in range(20):
            nm = NoiseModel(dose=dose, rng_seed=seed)
            y = counts_to_sinogram(simulate_counts(A32, x, nm), nm)
            per_dose.append(np.var(y - ax))
        variances.append(np.mean(per_dose))
    assert all(a < b for a, b in zip(variances, variances[1:])), variances


def test_clamp_never_triggers_at_the_highest_dose(A32):
    for seed in range(5):
        x = generate_phantom("random", (32, 32), seed=seed).image
        raw = simulate_counts(A32, x, NoiseModel(dose=1e5, rng_seed=seed))
        assert raw.below_floor == 0


def test_dose_schedules():
    assert dose_schedule(3, seed=0, dose=5e3) == [5e3, 5e3, 5e3]
    assert dose_schedule(5, seed=0, dose_set="standard") == list(DOSE_LEVELS) + [DOSE_LEVELS[0]]
    universal = dose_schedule(50, seed=3, dose_set="universal")
    assert set(universal) <= set(UNIVERSAL_DOSE_LEVELS)
    assert universal == dose_schedule(50, seed=3, dose_set="universal")
    with pytest.raises(ValidationError):
        dose_schedule(2, seed=0)


def test_dataset_does_not_depend_on_worker_count(A16):
    serial = simulate_dataset(A16, 6, seed=7, dose=1e4, workers=1)
    threaded = simulate_dataset(A16, 6, seed=7, dose=1e4, workers=3)
    for a, b in zip(serial, threaded):
        assert a.sample_id == b.sample_id
        assert np.array_equal(a.sinogram, b.sinogram)
        assert np.array_equal(a.phantom, b.phantom)


def test_dataset_directory_round_trip(A16, tmp_path):
    samples = simulate_dataset(A16, 3, seed=2, dose_set="standard")
    root = write_dataset(tmp_path / "data", samples, meta={"config": {"note": "unit"}})
    manifest = json.loads((root / "manifest.json").read_text())
    assert [entry["id"] for entry in manifest["samples"]] == ["00000", "00001", "00002"]
    assert (root / "00001_phantom.f32r").exists()
    assert (root / "00001_sino.f32r").exists()

    loaded, manifest = load_dataset(root)
    assert manifest["config"] == {"note": "unit"}
    for original, restored in zip(samples, loaded):
        assert restored.dose == original.dose
        assert restored.seed == original.seed
        assert np.array_equal(restored.sinogram, original.sinogram.astype(np.float32))
        assert np.array_equal(restored.phantom, original.phantom.astype(np.float32))


def test_writing_the_same_dataset_twice_is_byte_identical(A16, tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / name, simulate_dataset(A16, 2, seed=7, dose=1e4))
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
