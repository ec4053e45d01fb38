"""
Training Corpus

Generates the multi-vehicle corpus (road input, unsprung and sprung
accelerations per sample), splits it 7:3 stratified by class, standardises
channels with training-split statistics, persists it in a small binary
format with a JSON sidecar, and perturbs vehicle parameters for the
robustness sweep.
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (ConfigurationError, DatasetFormatError, GenerationAbortedError, MissingFileError,
                     NormalizationError)
from .road_profile import RoadPsdParams, draw_gamma, road_input_series, synthesize_profile
from .tracing import span
from .vehicle_dynamics import DEFAULT_DT_INTERNAL, VehicleParams, simulate_batch

logger = logging.getLogger(__name__)

MAGIC = b"SUSPDSV1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<QIId")
CHANNELS = ("road", "cabin", "unsprung")
MAX_DIVERGED_SHARE = 0.01
MAX_REGENERATION_ATTEMPTS = 5

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SimulationSettings:
    """Sampling and integration settings shared by every generated sample"""

    speed: float = 5.0
    sample_rate: float = 100.0
    dt_internal: float = DEFAULT_DT_INTERNAL
    signal_length: int = 1024
    profile_spacing: float = 0.05
    profile_margin: float = 2.0

    @property
    def duration(self) -> float:
        return self.signal_length / self.sample_rate

    @property
    def profile_length(self) -> float:
        return self.speed * self.duration + self.profile_margin

    def validate(self) -> "SimulationSettings":
        if not self.speed > 0:
            raise ConfigurationError(f"speed must be > 0, got {self.speed}")
        if not self.sample_rate > 0:
            raise ConfigurationError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.signal_length < 2:
            raise ConfigurationError(f"signal_length must be >= 2, got {self.signal_length}")
        if self.profile_margin < 0:
            raise ConfigurationError(f"profile_margin must be >= 0, got {self.profile_margin}")
        return self


@dataclass(frozen=True)
class Sample:
    road_accel: np.ndarray
    cabin_accel: np.ndarray
    unsprung_accel: np.ndarray
    class_id: int
    seed: int
    gamma: float


@dataclass(frozen=True)
class NormalizationStats:
    mean: Dict[str, float]
    std: Dict[str, float]

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationStats":
        return cls(mean={k: float(v) for k, v in data["mean"].items()},
                   std={k: float(v) for k, v in data["std"].items()})


@dataclass
class Dataset:
    """Samples stored as (n_samples, signal_length) float32 arrays plus per-sample metadata"""

    road_accel: np.ndarray
    cabin_accel: np.ndarray
    unsprung_accel: np.ndarray
    class_ids: np.ndarray
    seeds: np.ndarray
    gammas: np.ndarray
    is_test: np.ndarray
    sample_rate: float
    stats: Optional[NormalizationStats] = None
    normalized: bool = False
    vehicles: Tuple[VehicleParams, ...] = ()
    psd: Optional[RoadPsdParams] = None
    simulation: Optional[SimulationSettings] = None
    regenerated: int = 0

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def signal_length(self) -> int:
        return self.road_accel.shape[1]

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.class_ids))

    def split_mask(self, split: Optional[str]) -> np.ndarray:
        if split is None:
            return np.ones(len(self), dtype=bool)
        if split == "train":
            return ~self.is_test
        if split == "test":
            return self.is_test.copy()
        raise ConfigurationError(f"unknown split {split!r}")

    def channel(self, name: str, split: Optional[str] = None) -> np.ndarray:
        if name not in CHANNELS:
            raise ConfigurationError(f"unknown channel {name!r}")
        return getattr(self, f"{name}_accel")[self.split_mask(split)]

    def class_counts(self, split: Optional[str] = None) -> Dict[int, int]:
        ids, counts = np.unique(self.class_ids[self.split_mask(split)], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    @property
    def samples(self) -> List[Sample]:
        return [
            Sample(road_accel=self.road_accel[i], cabin_accel=self.cabin_accel[i],
                   unsprung_accel=self.unsprung_accel[i], class_id=int(self.class_ids[i]),
                   seed=int(self.seeds[i]), gamma=float(self.gammas[i]))
            for i in range(len(self))
        ]

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact comparison of arrays and metadata"""
        arrays = ("road_accel", "cabin_accel", "unsprung_accel", "class_ids", "seeds", "gammas", "is_test")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a))
                and getattr(self, a).dtype == getattr(other, a).dtype for a in arrays)
            and self.sample_rate == other.sample_rate
            and self.stats == other.stats
            and self.normalized == other.normalized
            and tuple(self.vehicles) == tuple(other.vehicles)
            and self.psd == other.psd
            and self.simulation == other.simulation
            and self.regenerated == other.regenerated
        )


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed derived from integer keys"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _synthesize_roads(seeds: Sequence[int], psd: RoadPsdParams, settings: SimulationSettings,
                      gamma_range: Tuple[float, float]):
    roads, gammas = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        gamma = draw_gamma(rng, *gamma_range)
        profile = synthesize_profile(psd.with_gamma(gamma), settings.profile_length,
                                     settings.profile_spacing, seed=int(rng.integers(2 ** 32)))
        roads.append(road_input_series(profile, settings.speed, settings.sample_rate, settings.duration))
        gammas.append(gamma)
    return roads, gammas


def generate_samples(vehicle: VehicleParams, seeds: Sequence[int], psd: RoadPsdParams,
                     settings: SimulationSettings, gamma_range: Tuple[float, float] = (0.0, 1.0)) -> Dict[str, Any]:
    """
    Simulate one vehicle over a fresh road per seed.

    Diverged simulations are redrawn with a seed derived from the original
    one; the number of redraws is returned under "regenerated".
    """
    settings.validate()
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    road = np.zeros((n, settings.signal_length), dtype=np.float32)
    cabin = np.zeros_like(road)
    unsprung = np.zeros_like(road)
    gammas = np.zeros(n)
    pending = list(range(n))
    regenerated = 0
    attempt = 0
    while pending:
        if attempt > MAX_REGENERATION_ATTEMPTS:
            raise GenerationAbortedError(
                f"{len(pending)} samples for class {vehicle.class_id} kept diverging after {attempt} redraws"
            )
        roads, drawn = _synthesize_roads([seeds[i] for i in pending], psd, settings, gamma_range)
        trajectory, diverged_at = simulate_batch(vehicle, roads, dt_internal=settings.dt_internal)
        still_pending = []
        for row, i in enumerate(pending):
            if diverged_at[row] >= 0:
                logger.warning("sample seed=%d class=%s diverged at step %d, regenerating",
                               seeds[i], vehicle.class_id, diverged_at[row])
                seeds[i] = derive_seed(seeds[i], attempt + 1)
                still_pending.append(i)
                continue
            road[i] = roads[row].acceleration
            cabin[i] = trajectory.a_s[row]
            unsprung[i] = trajectory.a_us[row]
            gammas[i] = drawn[row]
        regenerated += len(still_pending)
        pending = still_pending
        attempt += 1
    return {"road": road, "cabin": cabin, "unsprung": unsprung, "seeds": np.array(seeds, dtype=np.int64),
            "gammas": gammas, "regenerated": regenerated}


def stratified_split(class_ids: np.ndarray, test_fraction: float, seed: int) -> np.ndarray:
    """Boolean test mask with floor(n_c * test_fraction) test samples per class"""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    is_test = np.zeros(len(class_ids), dtype=bool)
    for class_id in np.unique(class_ids):
        members = np.flatnonzero(class_ids == class_id)
        n_test = int(math.floor(len(members) * test_fraction + 1e-9))
        is_test[rng.permutation(members)[:n_test]] = True
    return is_test


def generate_dataset(classes: Sequence[VehicleParams], n_per_class: int, seed: int,
                     psd: Optional[RoadPsdParams] = None, settings: Optional[SimulationSettings] = None,
                     gamma_range: Tuple[float, float] = (0.0, 1.0), test_fraction: float = 0.3,
                     threads: int = 1) -> Dataset:
    """
    Build the multi-vehicle corpus.

    Args:
        classes: vehicles to simulate, each with a class_id
        n_per_class: samples per vehicle
        seed: master seed; every sample gets its own derived seed
        psd: PSD template (gamma is redrawn per sample)
        settings: sampling/integration settings
        gamma_range: bounds of the uniform roughness draw
        test_fraction: stratified test share (floor per class)
        threads: worker cap for per-class simulation

    Returns:
        Dataset with raw (un-normalised) channels
    """
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    if not classes:
        raise ConfigurationError("no vehicle classes given")
    psd = (psd or RoadPsdParams()).validate()
    settings = (settings or SimulationSettings()).validate()
    for vehicle in classes:
        vehicle.validate()
        if vehicle.class_id is None:
            raise ConfigurationError("every vehicle in the corpus needs a class_id")

    def run(vehicle: VehicleParams) -> Dict[str, Any]:
        seeds = [derive_seed(seed, vehicle.class_id, i) for i in range(n_per_class)]
        logger.info("simulating class %d: %d samples", vehicle.class_id, n_per_class)
        return generate_samples(vehicle, seeds, psd, settings, gamma_range)

    with span("generate_dataset", n_classes=len(classes), n_per_class=n_per_class, seed=seed):
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            parts = list(pool.map(run, classes))

    total = n_per_class * len(classes)
    regenerated = sum(p["regenerated"] for p in parts)
    if regenerated:
        logger.warning("%d of %d samples diverged and were regenerated", regenerated, total)
    if regenerated > MAX_DIVERGED_SHARE * total:
        raise GenerationAbortedError(f"{regenerated} of {total} samples diverged (limit {MAX_DIVERGED_SHARE:.0%})")

    class_ids = np.concatenate([np.full(n_per_class, v.class_id, dtype=np.int64) for v in classes])
    return Dataset(
        road_accel=np.concatenate([p["road"] for p in parts]),
        cabin_accel=np.concatenate([p["cabin"] for p in parts]),
        unsprung_accel=np.concatenate([p["unsprung"] for p in parts]),
        class_ids=class_ids,
        seeds=np.concatenate([p["seeds"] for p in parts]),
        gammas=np.concatenate([p["gammas"] for p in parts]),
        is_test=stratified_split(class_ids, test_fraction, derive_seed(seed, 0x5EED)),
        sample_rate=settings.sample_rate,
        vehicles=tuple(classes),
        psd=psd,
        simulation=settings,
        regenerated=regenerated,
    )


def compute_stats(ds: Dataset) -> NormalizationStats:
    train = ds.split_mask("train")
    if not train.any():
        raise NormalizationError("training split is empty")
    mean, std = {}, {}
    for name in CHANNELS:
        values = ds.channel(name, "train").astype(np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())
        if not std[name] > 0:
            raise NormalizationError(f"channel {name!r} has zero variance on the training split")
    return NormalizationStats(mean=mean, std=std)


def normalize(ds: Dataset) -> Dataset:
    """Standardise every channel with training-split mean/std"""
    if ds.normalized:
        return ds
    stats = compute_stats(ds)
    scaled = {
        f"{name}_accel": ((ds.channel(name).astype(np.float64) - stats.mean[name]) / stats.std[name]).astype(np.float32)
        for name in CHANNELS
    }
    return replace(ds, stats=stats, normalized=True, **scaled)


def normalize_series(series: np.ndarray, stats: NormalizationStats, channel: str) -> np.ndarray:
    return (np.asarray(series, dtype=np.float64) - stats.mean[channel]) / stats.std[channel]


def denormalize(series: np.ndarray, stats: NormalizationStats, channel: str) -> np.ndarray:
    return np.asarray(series, dtype=np.float64) * stats.std[channel] + stats.mean[channel]


def raw_channel(ds: Dataset, name: str, split: Optional[str] = None) -> np.ndarray:
    """Channel in physical units whether or not the dataset is normalised"""
    values = ds.channel(name, split)
    return denormalize(values, ds.stats, name) if ds.normalized else values.astype(np.float64)


def perturb_vehicle(p: VehicleParams, fraction: float, seed: int) -> VehicleParams:
    """Scale masses, damping and stiffnesses by independent (1 + U(-fraction, fraction)) factors"""
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"perturbation fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    eps = rng.uniform(-fraction, fraction, size=5)
    fields = ("m_s", "m_us", "c_s", "k_s", "k_us")
    return replace(p, **{name: getattr(p, name) * (1.0 + e) for name, e in zip(fields, eps)})


def iter_batches(ds: Dataset, split: Optional[str], batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """
    Shuffled index batches with classes interleaved in proportion.

    Element j of a class with n_c members is placed at (j + 0.5) / n_c, so
    every batch holds each class's share to within one sample.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    indices = np.flatnonzero(ds.split_mask(split))
    if len(indices) == 0:
        return
    labels = ds.class_ids[indices]
    classes = np.unique(labels)
    tie_break = rng.permutation(len(classes))
    keys, order = [], []
    for rank, class_id in zip(tie_break, classes):
        members = rng.permutation(indices[labels == class_id])
        keys.append((np.arange(len(members)) + 0.5) / len(members) + rank * 1e-9)
        order.append(members)
    keys = np.concatenate(keys)
    order = np.concatenate(order)[np.argsort(keys, kind="stable")]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(ds: Dataset, path: PathLike) -> Path:
    """Write the float32 payload and its JSON sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.stack([ds.road_accel, ds.cabin_accel, ds.unsprung_accel]).astype("<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(len(ds), ds.signal_length, len(CHANNELS), float(ds.sample_rate)))
        f.write(payload.tobytes(order="C"))
    meta = {
        "format_version": FORMAT_VERSION,
        "sample_rate": ds.sample_rate,
        "signal_length": ds.signal_length,
        "class_ids": ds.class_ids.tolist(),
        "seeds": ds.seeds.tolist(),
        "gammas": ds.gammas.tolist(),
        "is_test": ds.is_test.tolist(),
        "test_indices": np.flatnonzero(ds.is_test).tolist(),
        "stats": ds.stats.to_dict() if ds.stats else None,
        "normalized": ds.normalized,
        "vehicles": [v.to_dict() for v in ds.vehicles],
        "psd": asdict(ds.psd) if ds.psd else None,
        "simulation": asdict(ds.simulation) if ds.simulation else None,
        "regenerated": ds.regenerated,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


def load(path: PathLike) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"dataset file not found: {path}")
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise MissingFileError(f"dataset sidecar not found: {meta_path}")

    raw = path.read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path} is not a dataset file (bad magic)")
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise DatasetFormatError(f"{path} is truncated (incomplete header)")
    n, length, n_channels, sample_rate = _HEADER.unpack_from(raw, len(MAGIC))
    if n_channels != len(CHANNELS):
        raise DatasetFormatError(f"{path} has {n_channels} channels, expected {len(CHANNELS)}")
    offset = len(MAGIC) + _HEADER.size
    expected = n_channels * n * length * 4
    if len(raw) - offset != expected:
        raise DatasetFormatError(f"{path} payload is {len(raw) - offset} bytes, expected {expected} (truncated?)")
    if expected == 0:
        payload = np.zeros((n_channels, n, length), dtype=np.float32)
    else:
        payload = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(n_channels, n, length).astype(np.float32)

    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{meta_path} is not valid JSON: {e}") from e
    if not isinstance(meta, dict):
        raise DatasetFormatError(f"{meta_path} must hold a JSON object")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {meta.get('format_version')!r}")
    try:
        if meta["signal_length"] != length or len(meta["class_ids"]) != n:
            raise DatasetFormatError(f"{meta_path} does not match {path}")
        return Dataset(
            road_accel=payload[0],
            cabin_accel=payload[1],
            unsprung_accel=payload[2],
            class_ids=np.array(meta["class_ids"], dtype=np.int64),
            seeds=np.array(meta["seeds"], dtype=np.int64),
            gammas=np.array(meta["gammas"], dtype=np.float64),
            is_test=np.array(meta["is_test"], dtype=bool),
            sample_rate=float(sample_rate),
            stats=NormalizationStats.from_dict(meta["stats"]) if meta["stats"] else None,
            normalized=bool(meta["normalized"]),
            vehicles=tuple(VehicleParams(**v) for v in meta["vehicles"]),
            psd=RoadPsdParams(**meta["psd"]) if meta["psd"] else None,
            simulation=SimulationSettings(**meta["simulation"]) if meta["simulation"] else None,
            regenerated=int(meta["regenerated"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"{meta_path} is missing or has a malformed field: {e!r}") from e
