import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid

from estimator.errors import ConfigurationError, DomainError, RangeError
from estimator.road_profile import (G0_PER_GAMMA, RoadProfile, RoadPsdParams, draw_gamma, estimate_psd, profile_to_frame,
                                    psd_value, road_input_series, synthesize_profile)


def test_psd_value_at_reference_frequency():
    params = RoadPsdParams(gamma=0.5)
    assert psd_value(params, params.lambda0) == pytest.approx(0.5 * G0_PER_GAMMA)


def test_psd_value_follows_power_law():
    params = RoadPsdParams(gamma=1.0, nu=-2.0)
    lam = np.array([0.05, 0.1, 0.2, 0.4])
    values = psd_value(params, lam)
    np.testing.assert_allclose(values[1:] / values[:-1], 0.25)


@pytest.mark.parametrize("lam", [0.0, -0.1])
def test_psd_value_rejects_non_positive_frequency(lam):
    with pytest.raises(DomainError):
        psd_value(RoadPsdParams(), lam)


def test_zero_roughness_gives_flat_road():
    profile = synthesize_profile(RoadPsdParams(gamma=0.0), 10.0, 0.05, seed=1)
    assert np.all(profile.elevations == 0.0)


def test_point_count_and_spacing():
    profile = synthesize_profile(RoadPsdParams(), 51.2, 0.05, seed=3)
    assert len(profile.elevations) == 1025
    assert profile.extent == pytest.approx(51.2)


def test_same_seed_same_profile():
    a = synthesize_profile(RoadPsdParams(), 20.0, 0.05, seed=42)
    b = synthesize_profile(RoadPsdParams(), 20.0, 0.05, seed=42)
    c = synthesize_profile(RoadPsdParams(), 20.0, 0.05, seed=43)
    assert np.array_equal(a.elevations, b.elevations)
    assert not np.array_equal(a.elevations, c.elevations)


def test_chunking_does_not_change_profile():
    a = synthesize_profile(RoadPsdParams(), 20.0, 0.05, seed=7)
    b = synthesize_profile(RoadPsdParams(), 20.0, 0.05, seed=7, chunk=17)
    np.testing.assert_allclose(a.elevations, b.elevations, rtol=0, atol=1e-15)


def test_spacing_must_respect_nyquist():
    with pytest.raises(ConfigurationError):
        synthesize_profile(RoadPsdParams(lambda_max=4.0), 10.0, 0.2, seed=0)


@pytest.mark.parametrize("kwargs", [
    {"lambda_min": 0.0},
    {"lambda_min": 1.0, "lambda_max": 0.5},
    {"n_components": 1},
    {"gamma": -0.1},
])
def test_invalid_psd_parameters(kwargs):
    with pytest.raises(ConfigurationError):
        RoadPsdParams(**kwargs).validate()


def _bands(lo, hi, dlam):
    edges = [lo]
    while edges[-1] < hi:
        edges.append(max(edges[-1] * 1.5, edges[-1] + 6 * dlam))
    return np.array(edges)


def test_ensemble_psd_matches_target_spectrum():
    params = RoadPsdParams(gamma=1.0)
    spacing, length, n_profiles = 0.1, 256.0, 200
    lam_lines = params.spatial_frequencies
    line_power = psd_value(params, lam_lines) * params.delta_lambda

    estimates = []
    for seed in range(n_profiles):
        lam, g = estimate_psd(synthesize_profile(params, length, spacing, seed=seed), nperseg=1024)
        estimates.append(g)
    lam = np.asarray(lam)
    g_mean = np.mean(estimates, axis=0)
    d_welch = lam[1] - lam[0]

    edges = _bands(0.05, 2.0, params.delta_lambda)
    centres, densities = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        target = line_power[(lam_lines >= a) & (lam_lines < b)].sum()
        measured = g_mean[(lam >= a) & (lam < b)].sum() * d_welch
        assert abs(10 * np.log10(measured / target)) < 3.0, (a, b)
        centres.append(np.sqrt(a * b))
        densities.append(measured / (b - a))

    slope = np.polyfit(np.log(centres), np.log(densities), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.2)


def _sine_profile(wavelength=2.0, amplitude=0.01, length=40.0, spacing=0.01):
    x = np.arange(int(round(length / spacing)) + 1) * spacing
    return RoadProfile(elevations=amplitude * np.sin(2 * np.pi * x / wavelength), spacing=spacing)


def test_road_input_series_derivatives():
    u, wavelength, amplitude = 5.0, 2.0, 0.01
    series = road_input_series(_sine_profile(wavelength, amplitude), u, 100.0, 4.0)
    w = 2 * np.pi * u / wavelength
    t = series.time
    assert len(series) == 400
    np.testing.assert_allclose(series.elevation, amplitude * np.sin(w * t), atol=1e-6)
    np.testing.assert_allclose(series.velocity, amplitude * w * np.cos(w * t), atol=1e-4 * amplitude * w)
    np.testing.assert_allclose(series.acceleration, -amplitude * w * w * np.sin(w * t), atol=1e-2 * amplitude * w * w)


def test_road_input_series_needs_enough_road():
    with pytest.raises(RangeError):
        road_input_series(_sine_profile(length=10.0), 5.0, 100.0, 4.0)


def test_draw_gamma_stays_in_bounds():
    rng = np.random.default_rng(0)
    draws = [draw_gamma(rng, 0.2, 0.3) for _ in range(100)]
    assert min(draws) >= 0.2 and max(draws) < 0.3


def test_profile_to_frame():
    profile = synthesize_profile(RoadPsdParams(), 5.0, 0.05, seed=1)
    frame = profile_to_frame(profile)
    assert list(frame.columns) == ["position_m", "elevation_m"]
    assert len(frame) == len(profile.elevations)
    assert frame["position_m"].iloc[-1] == pytest.approx(5.0)


def test_gamma_scales_elevation_by_square_root():
    low = synthesize_profile(RoadPsdParams(gamma=0.25), 20.0, 0.05, seed=8)
    high = synthesize_profile(RoadPsdParams(gamma=1.0), 20.0, 0.05, seed=8)
    scale = np.abs(high.elevations).max()
    np.testing.assert_allclose(high.elevations, 2.0 * low.elevations, rtol=0, atol=1e-12 * scale)


def test_acceleration_integrates_back_to_elevation():
    profile = synthesize_profile(RoadPsdParams(gamma=1.0, lambda_max=0.5), 52.0, 0.05, seed=12)
    series = road_input_series(profile, u=5.0, sample_rate=1000.0, duration=10.0)
    dt = 1.0 / series.sample_rate
    velocity = series.velocity[0] + cumulative_trapezoid(series.acceleration, dx=dt, initial=0.0)
    elevation = series.elevation[0] + cumulative_trapezoid(velocity, dx=dt, initial=0.0)
    tolerance = 1e-2 * np.abs(series.elevation).max()
    assert np.abs(elevation - series.elevation).max() < tolerance
    assert np.abs(velocity - series.velocity).max() < 1e-2 * np.abs(series.velocity).max()


def test_standard_duration_covers_exact_distance():
    series = road_input_series(synthesize_profile(RoadPsdParams(), 51.2, 0.05, seed=4), u=5.0, sample_rate=100.0,
                               duration=10.24)
    assert len(series) == 1024
    assert series.time[-1] * series.speed == pytest.approx(51.15)
    with pytest.raises(RangeError):
        road_input_series(synthesize_profile(RoadPsdParams(), 51.0, 0.05, seed=4), u=5.0, sample_rate=100.0,
                          duration=10.24)
