"""
Road Profile Synthesis

Stochastic road elevation profiles from a power-law spatial PSD
G(lambda) = G0 * (lambda / lambda0) ** nu, built by spectral representation
(sum of cosines with random phases), and their conversion into time-domain
road input signals seen by a vehicle travelling at constant speed.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from scipy.signal import welch

from .errors import ConfigurationError, DomainError, RangeError

# G0 per unit roughness scale, m^3/cycle
G0_PER_GAMMA = 6e-3

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class RoadPsdParams:
    """Spectral description of a road surface"""

    nu: float = -2.0
    gamma: float = 0.5
    lambda0: float = 0.1
    lambda_min: float = 0.01
    lambda_max: float = 4.0
    n_components: int = 512

    @property
    def g_lambda0(self) -> float:
        return self.gamma * G0_PER_GAMMA

    def validate(self) -> "RoadPsdParams":
        if not self.lambda_min > 0:
            raise ConfigurationError(f"lambda_min must be > 0, got {self.lambda_min}")
        if not self.lambda_max > self.lambda_min:
            raise ConfigurationError(
                f"lambda_max ({self.lambda_max}) must exceed lambda_min ({self.lambda_min})"
            )
        if self.n_components < 2:
            raise ConfigurationError(f"n_components must be >= 2, got {self.n_components}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if not self.lambda0 > 0:
            raise ConfigurationError(f"lambda0 must be > 0, got {self.lambda0}")
        return self

    def with_gamma(self, gamma: float) -> "RoadPsdParams":
        return replace(self, gamma=float(gamma))

    @property
    def spatial_frequencies(self) -> np.ndarray:
        return np.linspace(self.lambda_min, self.lambda_max, self.n_components)

    @property
    def delta_lambda(self) -> float:
        return (self.lambda_max - self.lambda_min) / (self.n_components - 1)


@dataclass(frozen=True)
class RoadProfile:
    """Sampled road elevation along distance"""

    elevations: np.ndarray
    spacing: float
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.spacing > 0:
            raise ConfigurationError(f"profile spacing must be > 0, got {self.spacing}")
        if not np.all(np.isfinite(self.elevations)):
            raise ConfigurationError("profile contains non-finite elevations")

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self.elevations)) * self.spacing

    @property
    def extent(self) -> float:
        return (len(self.elevations) - 1) * self.spacing


@dataclass(frozen=True)
class RoadInputSeries:
    """Road elevation, velocity and acceleration seen at the tire over time"""

    elevation: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    sample_rate: float
    speed: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.elevation)
        if len(self.velocity) != n or len(self.acceleration) != n:
            raise ConfigurationError("road input series must have equal lengths")
        if not self.sample_rate > 0:
            raise ConfigurationError(f"sample_rate must be > 0, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.elevation)

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self.elevation)) / self.sample_rate


def psd_value(params: RoadPsdParams, lam: ArrayLike) -> ArrayLike:
    """One-sided spatial PSD G(lambda) in m^3/cycle"""
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise DomainError(f"spatial frequency must be > 0, got {lam}")
    value = params.g_lambda0 * (lam_arr / params.lambda0) ** params.nu
    return float(value) if np.ndim(value) == 0 else value


def draw_gamma(rng: np.random.Generator, low: float = 0.0, high: float = 1.0) -> float:
    return float(rng.uniform(low, high))


def _point_count(length: float, spacing: float) -> int:
    # tolerance keeps 51.2 / 0.05 from rounding up to an extra point
    return int(math.ceil(length / spacing - 1e-9)) + 1


def synthesize_profile(params: RoadPsdParams, length: float, spacing: float, seed: Optional[int],
                       chunk: int = 4096) -> RoadProfile:
    """
    Build a road profile by spectral representation.

    Each of the n_components spatial frequencies lambda_k (equally spaced in
    [lambda_min, lambda_max]) contributes sqrt(2 G(lambda_k) dlambda) *
    cos(2 pi lambda_k x + phi_k) with phi_k ~ U[0, 2 pi) from the seeded
    generator.

    Args:
        params: PSD parameters
        length: profile length in m
        spacing: spatial step in m, must satisfy the spatial Nyquist limit
        seed: generator seed

    Returns:
        RoadProfile with ceil(length/spacing)+1 points
    """
    params.validate()
    if not length > 0:
        raise ConfigurationError(f"profile length must be > 0, got {length}")
    if not spacing > 0:
        raise ConfigurationError(f"profile spacing must be > 0, got {spacing}")
    if not spacing < 1.0 / (2.0 * params.lambda_max):
        raise ConfigurationError(
            f"spacing {spacing} m violates the spatial Nyquist limit for lambda_max={params.lambda_max} cycle/m"
        )

    rng = np.random.default_rng(seed)
    lam = params.spatial_frequencies
    phases = rng.uniform(0.0, 2.0 * np.pi, size=lam.shape)
    amplitudes = np.sqrt(2.0 * psd_value(params, lam) * params.delta_lambda)
    a_cos = amplitudes * np.cos(phases)
    a_sin = amplitudes * np.sin(phases)

    x = np.arange(_point_count(length, spacing)) * spacing
    elevations = np.empty_like(x)
    # cos(w x + phi) = cos(w x) cos(phi) - sin(w x) sin(phi)
    for start in range(0, len(x), chunk):
        arg = 2.0 * np.pi * np.outer(x[start:start + chunk], lam)
        elevations[start:start + chunk] = np.cos(arg) @ a_cos - np.sin(arg) @ a_sin

    return RoadProfile(elevations=elevations, spacing=float(spacing), seed=seed)


def road_input_series(profile: RoadProfile, u: float, sample_rate: float, duration: float) -> RoadInputSeries:
    """
    Resample a profile along x = u t with a cubic spline.

    Velocity and acceleration come from the spline's analytic derivatives
    (d/dt = u d/dx).
    """
    if not u > 0:
        raise ConfigurationError(f"speed must be > 0, got {u}")
    if not sample_rate > 0:
        raise ConfigurationError(f"sample_rate must be > 0, got {sample_rate}")
    if not duration > 0:
        raise ConfigurationError(f"duration must be > 0, got {duration}")
    needed = u * duration
    if needed > profile.extent + 1e-9:
        raise RangeError(
            f"{duration} s at {u} m/s needs {needed:.3f} m of road, profile covers {profile.extent:.3f} m"
        )

    n = int(round(duration * sample_rate))
    x = u * np.arange(n) / sample_rate
    spline = CubicSpline(profile.positions, profile.elevations)
    return RoadInputSeries(
        elevation=spline(x),
        velocity=u * spline(x, 1),
        acceleration=u * u * spline(x, 2),
        sample_rate=float(sample_rate),
        speed=float(u),
    )


def estimate_psd(profile: RoadProfile, nperseg: int = 1024) -> Tuple[np.ndarray, np.ndarray]:
    """Welch estimate of the one-sided spatial PSD (cycle/m, m^3/cycle)"""
    nperseg = min(nperseg, len(profile.elevations))
    return welch(profile.elevations, fs=1.0 / profile.spacing, nperseg=nperseg)


def profile_to_frame(profile: RoadProfile) -> pd.DataFrame:
    return pd.DataFrame({"position_m": profile.positions, "elevation_m": profile.elevations})
