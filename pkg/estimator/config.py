"""
Run Configuration

A single JSON document describes a run: seed, file locations, road
spectrum, sampling, training hyper-parameters, vehicle set and the
evaluation sweeps. Command-line flags override individual keys with dotted
names (`train.epochs`).
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from .dataset import SimulationSettings
from .errors import ConfigurationError, FormatError, MissingFileError
from .road_profile import RoadPsdParams
from .training import TrainConfig
from .vehicle_dynamics import STANDARD_VEHICLES, VehicleParams

CONFIG_VERSION = 1
OUTPUT_DIR_ENV = "CABIN2TIRE_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "output_runs"
DEFAULT_SWEEP_FRACTIONS = (0.01, 0.05, 0.10, 0.15, 0.20, 0.30, 0.40)
DEFAULT_TF_AMPLITUDES = (0.5, 1.0, 2.0, 4.0, 8.0)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PsdConfig:
    """Road spectrum template plus the bounds of the per-sample roughness draw"""

    nu: float = -2.0
    lambda0: float = 0.1
    lambda_min: float = 0.01
    lambda_max: float = 4.0
    n_components: int = 512
    gamma_low: float = 0.0
    gamma_high: float = 1.0

    def params(self) -> RoadPsdParams:
        return RoadPsdParams(nu=self.nu, lambda0=self.lambda0, lambda_min=self.lambda_min,
                             lambda_max=self.lambda_max, n_components=self.n_components).validate()

    @property
    def gamma_range(self) -> Tuple[float, float]:
        return self.gamma_low, self.gamma_high

    def validate(self) -> "PsdConfig":
        if not 0.0 <= self.gamma_low <= self.gamma_high:
            raise ConfigurationError(f"need 0 <= gamma_low <= gamma_high, got {self.gamma_low}, {self.gamma_high}")
        self.params()
        return self


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR


@dataclass(frozen=True)
class RunConfig:
    seed: int
    version: int = CONFIG_VERSION
    output_dir: str = field(default_factory=default_output_dir)
    dataset_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    n_per_class: int = 1000
    test_fraction: float = 0.3
    threads: int = 1
    psd: PsdConfig = field(default_factory=PsdConfig)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    vehicles: Tuple[VehicleParams, ...] = STANDARD_VEHICLES
    sweep_fractions: Tuple[float, ...] = DEFAULT_SWEEP_FRACTIONS
    sweep_n_per_cell: int = 100
    tf_amplitudes: Tuple[float, ...] = DEFAULT_TF_AMPLITUDES
    tf_n_freq: int = 1025

    @property
    def resolved_dataset_path(self) -> Path:
        return Path(self.dataset_path) if self.dataset_path else Path(self.output_dir) / "dataset.bin"

    @property
    def resolved_checkpoint_path(self) -> Path:
        return Path(self.checkpoint_path) if self.checkpoint_path else Path(self.output_dir) / "model.ckpt"

    def validate(self) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise FormatError(f"unsupported config version {self.version!r}, expected {CONFIG_VERSION}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigurationError(f"seed must be an integer, got {self.seed!r}")
        if self.n_per_class < 1:
            raise ConfigurationError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        if self.sweep_n_per_cell < 1:
            raise ConfigurationError(f"sweep_n_per_cell must be >= 1, got {self.sweep_n_per_cell}")
        if list(self.sweep_fractions) != sorted(self.sweep_fractions):
            raise ConfigurationError(f"sweep_fractions must be ascending, got {list(self.sweep_fractions)}")
        if not self.vehicles:
            raise ConfigurationError("at least one vehicle is required")
        ids = [v.class_id for v in self.vehicles]
        if any(i is None for i in ids) or len(set(ids)) != len(ids):
            raise ConfigurationError(f"vehicles need distinct class_id values, got {ids}")
        for vehicle in self.vehicles:
            vehicle.validate()
        self.psd.validate()
        self.simulation.validate()
        self.train.validate()
        if max(ids) > self.train.n_classes:
            raise ConfigurationError(f"class_id {max(ids)} exceeds train.n_classes={self.train.n_classes}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset_path": self.dataset_path,
            "checkpoint_path": self.checkpoint_path,
            "n_per_class": self.n_per_class,
            "test_fraction": self.test_fraction,
            "threads": self.threads,
            "psd": asdict(self.psd),
            "simulation": asdict(self.simulation),
            "train": self.train.to_dict(),
            "vehicles": [v.to_dict() for v in self.vehicles],
            "sweep_fractions": list(self.sweep_fractions),
            "sweep_n_per_cell": self.sweep_n_per_cell,
            "tf_amplitudes": list(self.tf_amplitudes),
            "tf_n_freq": self.tf_n_freq,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        if "version" not in data:
            raise FormatError("config has no 'version' field")
        if data.get("seed") is None:
            raise ConfigurationError("config must set 'seed'")
        if "psd" in data:
            data["psd"] = _section(PsdConfig, data["psd"], "psd")
        if "simulation" in data:
            data["simulation"] = _section(SimulationSettings, data["simulation"], "simulation")
        if "train" in data:
            if not isinstance(data["train"], Mapping):
                raise ConfigurationError("'train' must be an object")
            data["train"] = TrainConfig.from_dict(data["train"])
        if "vehicles" in data:
            data["vehicles"] = _vehicles(data["vehicles"])
        for key in ("sweep_fractions", "tf_amplitudes"):
            if key in data:
                data[key] = tuple(float(x) for x in data[key])
        try:
            config = cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"invalid config: {e}") from e
        return config.validate()

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """New config with dotted keys replaced; None values are ignored"""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            target = data
            parts = key.split(".")
            for part in parts[:-1]:
                if not isinstance(target.get(part), dict):
                    raise ConfigurationError(f"unknown config key {key!r}")
                target = target[part]
            if parts[-1] not in target:
                raise ConfigurationError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        return RunConfig.from_dict(data)


def _section(cls, data: Any, name: str):
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"'{name}' must be an object")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown {name} key(s): {sorted(unknown)}")
    return cls(**data)


def _vehicles(items: Any) -> Tuple[VehicleParams, ...]:
    if not isinstance(items, list):
        raise ConfigurationError("'vehicles' must be a list")
    vehicles = []
    for item in items:
        if isinstance(item, int):
            vehicles.append(STANDARD_VEHICLES[_class_index(item)])
        elif isinstance(item, Mapping):
            vehicles.append(VehicleParams.from_dict(item))
        else:
            raise ConfigurationError(f"vehicle entries must be class ids or objects, got {item!r}")
    return tuple(vehicles)


def _class_index(class_id: int) -> int:
    ids = [v.class_id for v in STANDARD_VEHICLES]
    if class_id not in ids:
        raise ConfigurationError(f"no built-in vehicle with class_id {class_id}")
    return ids.index(class_id)


def load_run_config(path: Optional[PathLike], seed: Optional[int] = None) -> RunConfig:
    """
    Read a run config.

    Without a file the defaults are used and `seed` must be given. A `seed`
    argument overrides the file's value.
    """
    if path is None:
        data: Dict[str, Any] = {"version": CONFIG_VERSION}
    else:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise FormatError(f"{path} must hold a JSON object")
    if seed is not None:
        data["seed"] = seed
    return RunConfig.from_dict(data)


def config_keys(prefixes: List[str]) -> List[str]:
    """Dotted config keys under the given top-level names (for help text)"""
    template = RunConfig(seed=0).to_dict()
    keys = []
    for prefix in prefixes:
        value = template[prefix]
        if isinstance(value, dict):
            keys.extend(f"{prefix}.{k}" for k in value)
        else:
            keys.append(prefix)
    return keys


def write_config_snapshot(config: RunConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path
