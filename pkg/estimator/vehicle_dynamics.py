"""
Nonlinear Quarter-Car Dynamics

Two-DOF quarter car (sprung body over unsprung wheel) with bilinear
suspension damping and a quadratic tire stiffness, integrated with a
fixed-step classical Runge-Kutta scheme. Also provides the linearised modal
analysis and the impulse-averaged transfer function used to summarise how
each suspension filters the road input.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import CubicHermiteSpline
from scipy.signal import find_peaks

from .errors import ConfigurationError, SimulationDivergedError
from .road_profile import RoadInputSeries

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DEFAULT_DT_INTERNAL = 5e-4
# RK4 is stable on the negative real axis up to about 2.785
STABLE_STEP_PRODUCT = 1.5


@dataclass(frozen=True)
class VehicleParams:
    """Mechanical parameters of one quarter-car class"""

    m_s: float
    m_us: float
    c_s: float
    k_s: float
    k_us: float
    beta1: float = 4.23
    beta2: float = 15.49
    v_plus: float = 0.0045
    v_minus: float = -0.005
    alpha: float = 0.1
    class_id: Optional[int] = None

    def validate(self) -> "VehicleParams":
        for name in ("m_s", "m_us", "c_s", "k_s", "k_us", "beta1", "beta2"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigurationError(f"vehicle parameter {name} must be positive and finite, got {value}")
        if not self.v_minus < 0 < self.v_plus:
            raise ConfigurationError(
                f"damping break points must satisfy v_minus < 0 < v_plus, got {self.v_minus}, {self.v_plus}"
            )
        if self.class_id is not None and not 1 <= self.class_id <= 5:
            raise ConfigurationError(f"class_id must be in 1..5, got {self.class_id}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VehicleParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        try:
            return cls(**data).validate()
        except TypeError as e:
            raise ConfigurationError(f"incomplete vehicle parameters: {e}") from e


STANDARD_VEHICLES: Tuple[VehicleParams, ...] = (
    VehicleParams(m_s=305.6, m_us=150.6, c_s=1.61e3, k_s=1.77e4, k_us=1.48e5, class_id=1),
    VehicleParams(m_s=429.8, m_us=13.39, c_s=2.46e3, k_s=3.48e4, k_us=2.68e5, class_id=2),
    VehicleParams(m_s=487.2, m_us=129.7, c_s=5.79e3, k_s=2.32e4, k_us=3.11e5, class_id=3),
    VehicleParams(m_s=2141.0, m_us=74.08, c_s=4.34e3, k_s=1.22e5, k_us=4.93e5, class_id=4),
    VehicleParams(m_s=372.9, m_us=206.5, c_s=2.76e3, k_s=1.76e4, k_us=1.69e6, class_id=5),
)


def vehicle_for_class(class_id: int) -> VehicleParams:
    for vehicle in STANDARD_VEHICLES:
        if vehicle.class_id == class_id:
            return vehicle
    raise ConfigurationError(f"no vehicle class {class_id}")


def linear_limit(p: VehicleParams) -> VehicleParams:
    """Same vehicle with linear tire and single-slope damping"""
    return replace(p, alpha=0.0, beta1=1.0, beta2=1.0)


@dataclass(frozen=True)
class QuarterCarState:
    x_s: float = 0.0
    v_s: float = 0.0
    x_us: float = 0.0
    v_us: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x_s, self.v_s, self.x_us, self.v_us], dtype=float)


@dataclass
class StateTrajectory:
    """
    States and accelerations at the road sample instants.

    Arrays are 1-D for a single simulation and (batch, time) for
    `simulate_batch`.
    """

    x_s: np.ndarray
    v_s: np.ndarray
    x_us: np.ndarray
    v_us: np.ndarray
    a_s: np.ndarray
    a_us: np.ndarray
    sample_rate: float

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.x_s.shape[-1]) / self.sample_rate

    def row(self, i: int) -> "StateTrajectory":
        return StateTrajectory(
            x_s=self.x_s[i], v_s=self.v_s[i], x_us=self.x_us[i], v_us=self.v_us[i],
            a_s=self.a_s[i], a_us=self.a_us[i], sample_rate=self.sample_rate,
        )


def _as_output(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def damping_force(p: VehicleParams, v_rel: ArrayLike) -> ArrayLike:
    """
    Bilinear suspension damper force.

    Slope c_s between the break points v_minus and v_plus, beta1*c_s above
    v_plus and beta2*c_s below v_minus; continuous everywhere.
    """
    v = np.asarray(v_rel, dtype=float)
    c = p.c_s
    force = np.where(
        v > p.v_plus,
        c * p.v_plus + p.beta1 * c * (v - p.v_plus),
        np.where(v < p.v_minus, c * p.v_minus + p.beta2 * c * (v - p.v_minus), c * v),
    )
    return _as_output(force)


def tire_force(p: VehicleParams, deflection: ArrayLike) -> ArrayLike:
    """Quadratic tire spring k_us (d + alpha d^2); positive d is compression"""
    d = np.asarray(deflection, dtype=float)
    return _as_output(p.k_us * (d + p.alpha * d * d))


def _accelerations(p: VehicleParams, x_s, v_s, x_us, v_us, r):
    f_damp = damping_force(p, v_s - v_us)
    f_spring = p.k_s * (x_s - x_us)
    f_tire = tire_force(p, x_us - r)
    return (-f_damp - f_spring) / p.m_s, (f_damp + f_spring - f_tire) / p.m_us


def mechanical_energy(p: VehicleParams, x_s, v_s, x_us, v_us, r=0.0):
    """Kinetic plus spring potential energy (tire potential includes the quadratic term)"""
    d = np.asarray(x_us) - r
    return (
        0.5 * p.m_s * np.square(v_s)
        + 0.5 * p.m_us * np.square(v_us)
        + 0.5 * p.k_s * np.square(np.asarray(x_s) - x_us)
        + p.k_us * (0.5 * d * d + p.alpha * d ** 3 / 3.0)
    )


def substeps_per_sample(sample_rate: float, dt_internal: float) -> int:
    """Integer number of RK4 steps per output sample (step <= dt_internal)"""
    if not dt_internal > 0:
        raise ConfigurationError(f"dt_internal must be > 0, got {dt_internal}")
    if dt_internal > 1.0 / (2.0 * sample_rate) + 1e-15:
        raise ConfigurationError(
            f"dt_internal={dt_internal} s exceeds half the output sample period at {sample_rate} Hz"
        )
    return int(math.ceil(1.0 / (sample_rate * dt_internal) - 1e-9))


def stiffest_rate(p: VehicleParams) -> float:
    """Largest decay or oscillation rate (1/s) the integrator has to resolve for this vehicle"""
    damping = max(p.beta1, p.beta2, 1.0) * p.c_s * (1.0 / p.m_s + 1.0 / p.m_us)
    stiffness = math.sqrt((p.k_s + p.k_us * (1.0 + 2.0 * abs(p.alpha))) / p.m_us + p.k_s / p.m_s)
    return max(damping, stiffness)


def stable_substeps(p: VehicleParams, sample_rate: float, dt_internal: float = DEFAULT_DT_INTERNAL) -> int:
    """
    Substeps per sample for `p`: at least what dt_internal asks for, and
    enough that step * stiffest_rate(p) <= STABLE_STEP_PRODUCT.
    """
    n_sub = substeps_per_sample(sample_rate, dt_internal)
    needed = int(math.ceil(stiffest_rate(p) / (sample_rate * STABLE_STEP_PRODUCT) - 1e-9))
    if needed > n_sub:
        logger.debug("vehicle %s needs %d substeps per sample instead of %d for a stable step",
                     p.class_id, needed, n_sub)
        return needed
    return n_sub


def simulate_batch(p: VehicleParams, roads: Sequence[RoadInputSeries], dt_internal: float = DEFAULT_DT_INTERNAL,
                   initial: Optional[QuarterCarState] = None) -> Tuple[StateTrajectory, np.ndarray]:
    """
    Integrate one vehicle over several road inputs at once.

    The road elevation is interpolated between samples with a cubic Hermite
    spline built from the elevation and velocity series, so the steps inside
    one sample interval see a single cubic piece.

    Returns:
        (trajectory with (batch, time) arrays, first diverged step per row or -1)
    """
    if not roads:
        raise ConfigurationError("no road inputs to simulate")
    n = len(roads[0])
    fs = roads[0].sample_rate
    if n == 0:
        raise ConfigurationError("road series is empty")
    if any(len(r) != n or r.sample_rate != fs for r in roads):
        raise ConfigurationError("batched road inputs must share length and sample rate")
    n_sub = stable_substeps(p, fs, dt_internal)
    h = 1.0 / (fs * n_sub)

    elevation = np.stack([r.elevation for r in roads], axis=1)
    batch = elevation.shape[1]
    state0 = (initial or QuarterCarState()).as_array()
    x_s = np.full(batch, state0[0])
    v_s = np.full(batch, state0[1])
    x_us = np.full(batch, state0[2])
    v_us = np.full(batch, state0[3])

    out = np.empty((4, batch, n))
    out[:, :, 0] = x_s, v_s, x_us, v_us
    diverged_at = np.full(batch, -1, dtype=np.int64)

    if n > 1:
        velocity = np.stack([r.velocity for r in roads], axis=1)
        t = np.arange(n) / fs
        spline = CubicHermiteSpline(t, elevation, velocity, axis=0)
        # road at every step start, midpoint and end
        half_steps = np.arange(2 * (n - 1) * n_sub + 1) / (2.0 * n_sub * fs)
        road = spline(half_steps)

        with np.errstate(all="ignore"):
            step = 0
            for k in range(1, n):
                for _ in range(n_sub):
                    r0, rm, r1 = road[2 * step], road[2 * step + 1], road[2 * step + 2]
                    a1s, a1u = _accelerations(p, x_s, v_s, x_us, v_us, r0)
                    x2s, v2s = x_s + 0.5 * h * v_s, v_s + 0.5 * h * a1s
                    x2u, v2u = x_us + 0.5 * h * v_us, v_us + 0.5 * h * a1u
                    a2s, a2u = _accelerations(p, x2s, v2s, x2u, v2u, rm)
                    x3s, v3s = x_s + 0.5 * h * v2s, v_s + 0.5 * h * a2s
                    x3u, v3u = x_us + 0.5 * h * v2u, v_us + 0.5 * h * a2u
                    a3s, a3u = _accelerations(p, x3s, v3s, x3u, v3u, rm)
                    x4s, v4s = x_s + h * v3s, v_s + h * a3s
                    x4u, v4u = x_us + h * v3u, v_us + h * a3u
                    a4s, a4u = _accelerations(p, x4s, v4s, x4u, v4u, r1)
                    x_s = x_s + h / 6.0 * (v_s + 2.0 * v2s + 2.0 * v3s + v4s)
                    v_s = v_s + h / 6.0 * (a1s + 2.0 * a2s + 2.0 * a3s + a4s)
                    x_us = x_us + h / 6.0 * (v_us + 2.0 * v2u + 2.0 * v3u + v4u)
                    v_us = v_us + h / 6.0 * (a1u + 2.0 * a2u + 2.0 * a3u + a4u)
                    step += 1
                out[:, :, k] = x_s, v_s, x_us, v_us
                bad = ~np.isfinite(out[:, :, k]).all(axis=0) & (diverged_at < 0)
                if bad.any():
                    diverged_at[bad] = step

    with np.errstate(all="ignore"):
        a_s, a_us = _accelerations(p, out[0], out[1], out[2], out[3], elevation.T)
    trajectory = StateTrajectory(
        x_s=out[0], v_s=out[1], x_us=out[2], v_us=out[3], a_s=a_s, a_us=a_us, sample_rate=float(fs),
    )
    if (diverged_at >= 0).any():
        logger.debug("%d of %d simulations diverged", int((diverged_at >= 0).sum()), batch)
    return trajectory, diverged_at


def simulate(p: VehicleParams, road: RoadInputSeries, dt_internal: float = DEFAULT_DT_INTERNAL,
             initial: Optional[QuarterCarState] = None) -> StateTrajectory:
    """Simulate a single road input; raises SimulationDivergedError on blow-up"""
    trajectory, diverged_at = simulate_batch(p, [road], dt_internal=dt_internal, initial=initial)
    if diverged_at[0] >= 0:
        raise SimulationDivergedError(int(diverged_at[0]))
    return trajectory.row(0)


@dataclass(frozen=True)
class ModalProperties:
    frequencies_hz: np.ndarray
    damping_ratios: np.ndarray


def linear_state_matrix(p: VehicleParams) -> np.ndarray:
    """State matrix for [x_s, v_s, x_us, v_us] with alpha = 0 and unit damping slope"""
    m_s, m_us, c, k_s, k_us = p.m_s, p.m_us, p.c_s, p.k_s, p.k_us
    return np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-k_s / m_s, -c / m_s, k_s / m_s, c / m_s],
        [0.0, 0.0, 0.0, 1.0],
        [k_s / m_us, c / m_us, -(k_s + k_us) / m_us, -c / m_us],
    ])


def linearized_modes(p: VehicleParams) -> ModalProperties:
    """Natural frequencies (Hz) and damping ratios of the linearised quarter car, ascending"""
    eigenvalues = np.linalg.eigvals(linear_state_matrix(p))
    modes = []
    complex_part = eigenvalues[eigenvalues.imag > 1e-12]
    for lam in complex_part:
        wn = abs(lam)
        modes.append((wn, -lam.real / wn))
    real_part = np.sort(eigenvalues[np.abs(eigenvalues.imag) <= 1e-12].real)
    # overdamped pairs: wn^2 = l1 l2, 2 zeta wn = -(l1 + l2)
    for l1, l2 in zip(real_part[0::2], real_part[1::2]):
        wn = math.sqrt(l1 * l2)
        modes.append((wn, -(l1 + l2) / (2.0 * wn)))
    modes.sort()
    return ModalProperties(
        frequencies_hz=np.array([wn / (2.0 * np.pi) for wn, _ in modes]),
        damping_ratios=np.array([zeta for _, zeta in modes]),
    )


def linear_frequency_response(p: VehicleParams, freqs_hz: Iterable[float]) -> np.ndarray:
    """Closed-form sprung displacement over road displacement, X_s / R, for the linear limit"""
    mass = np.diag([p.m_s, p.m_us])
    damping = p.c_s * np.array([[1.0, -1.0], [-1.0, 1.0]])
    stiffness = np.array([[p.k_s, -p.k_s], [-p.k_s, p.k_s + p.k_us]])
    forcing = np.array([0.0, p.k_us])
    response = []
    for f in np.atleast_1d(np.asarray(list(freqs_hz), dtype=float)):
        w = 2.0 * np.pi * f
        dynamic = stiffness - w * w * mass + 1j * w * damping
        response.append(np.linalg.solve(dynamic, forcing)[0])
    return np.array(response)


@dataclass
class TransferFunction:
    freqs_hz: np.ndarray
    magnitude: np.ndarray
    per_amplitude: np.ndarray
    amplitudes: np.ndarray
    class_id: Optional[int] = None


def impulse_road(amplitude: float, n_samples: int, sample_rate: float, impulse_index: int) -> RoadInputSeries:
    """Road input whose acceleration is a single-sample impulse"""
    acceleration = np.zeros(n_samples)
    acceleration[impulse_index] = amplitude
    after = np.arange(n_samples) >= impulse_index
    velocity = np.where(after, amplitude / sample_rate, 0.0)
    elevation = np.where(after, amplitude / sample_rate * (np.arange(n_samples) - impulse_index) / sample_rate, 0.0)
    return RoadInputSeries(elevation=elevation, velocity=velocity, acceleration=acceleration,
                           sample_rate=float(sample_rate))


def transfer_function(p: VehicleParams, amplitudes: Sequence[float], n_freq: int = 1025,
                      sample_rate: float = 100.0, dt_internal: float = DEFAULT_DT_INTERNAL,
                      lead_in: float = 1.0) -> TransferFunction:
    """
    Amplitude-averaged transfer function from road acceleration to sprung acceleration.

    For each amplitude a single-sample road acceleration impulse is applied,
    |FFT(x_s'')| / |FFT(r'')| is taken on n_freq bins and the curves are
    averaged pointwise.
    """
    amplitudes = np.asarray(list(amplitudes), dtype=float)
    if amplitudes.size == 0 or np.any(amplitudes <= 0):
        raise ConfigurationError("impulse amplitudes must be a non-empty list of positive values")
    if n_freq < 2:
        raise ConfigurationError(f"n_freq must be >= 2, got {n_freq}")
    n_samples = 2 * (n_freq - 1)
    impulse_index = min(int(round(lead_in * sample_rate)), n_samples - 1)
    roads = [impulse_road(a, n_samples, sample_rate, impulse_index) for a in amplitudes]

    trajectory, diverged_at = simulate_batch(p, roads, dt_internal=dt_internal)
    if (diverged_at >= 0).any():
        raise SimulationDivergedError(int(diverged_at[diverged_at >= 0].min()))

    inputs = np.abs(np.fft.rfft(np.stack([r.acceleration for r in roads]), axis=1))
    outputs = np.abs(np.fft.rfft(trajectory.a_s, axis=1))
    curves = outputs / inputs
    return TransferFunction(
        freqs_hz=np.fft.rfftfreq(n_samples, d=1.0 / sample_rate),
        magnitude=curves.mean(axis=0),
        per_amplitude=curves,
        amplitudes=amplitudes,
        class_id=p.class_id,
    )


def resonance_peaks(freqs_hz: np.ndarray, magnitude: np.ndarray, n: int = 2) -> List[float]:
    """Frequencies of the n tallest local maxima, ascending"""
    peaks, _ = find_peaks(magnitude)
    tallest = peaks[np.argsort(magnitude[peaks])[::-1][:n]]
    return sorted(float(freqs_hz[i]) for i in tallest)


def peaks_against_modes(p: VehicleParams, tf: TransferFunction) -> pd.DataFrame:
    """
    One row per linearised mode: its frequency next to the matching
    transfer-function peak (ascending order), NaN where the curve has no
    separate peak for that mode.
    """
    modes = linearized_modes(p).frequencies_hz
    peaks = resonance_peaks(tf.freqs_hz, tf.magnitude, n=len(modes))
    peak_hz = np.full(len(modes), np.nan)
    peak_hz[:len(peaks)] = peaks
    return pd.DataFrame({
        "class_id": [p.class_id] * len(modes),
        "mode": np.arange(1, len(modes) + 1),
        "mode_hz": modes,
        "peak_hz": peak_hz,
        "relative_error": np.abs(peak_hz - modes) / modes,
    })


def trajectory_to_frame(trajectory: StateTrajectory, road: RoadInputSeries) -> pd.DataFrame:
    return pd.DataFrame({
        "t": trajectory.time,
        "r_ddot": road.acceleration,
        "x_us_ddot": trajectory.a_us,
        "x_s_ddot": trajectory.a_s,
    })


def transfer_function_to_frame(tf: TransferFunction) -> pd.DataFrame:
    return pd.DataFrame({"freq_hz": tf.freqs_hz, "magnitude": tf.magnitude})
